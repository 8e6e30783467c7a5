"""Closed-loop reconstruction on the 30-keyframe synthetic room; prints and saves the metrics."""
import argparse

from dgslam.experiments import closed_loop_world, run_variant, save_summary


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--output", default="results/closed_loop")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=int, help="final refinement iterations (default from config)")
    args = p.parse_args()
    extra = {"beta": args.beta} if args.beta is not None else {}
    rep = run_variant(closed_loop_world(args.seed), args.output, "full", seed=args.seed, **extra)
    for k, v in rep.metrics.items():
        print(f"{k}: {v}")
    print(f"runtime_s: {rep.runtime:.1f}")
    save_summary({"metrics": rep.metrics, "runtime_s": rep.runtime}, f"{args.output}/summary.json")


if __name__ == "__main__":
    main()
