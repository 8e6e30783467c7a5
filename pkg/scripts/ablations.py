"""Component ablations on the closed-loop synthetic room."""
import argparse

from dgslam.experiments import ABLATIONS, closed_loop_world, run_variant, save_summary

KEYS = ("ate_rmse_cm", "psnr", "ssim", "depth_l1_cm")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--output", default="results/ablations")
    p.add_argument("--variants", nargs="+", default=list(ABLATIONS), choices=list(ABLATIONS))
    p.add_argument("--beta", type=int, help="final refinement iterations (default from config)")
    args = p.parse_args()
    extra = {"beta": args.beta} if args.beta is not None else {}
    world = closed_loop_world()
    results = {}
    print(f"{'variant':22s}" + "".join(f"{k:>14s}" for k in KEYS))
    for v in args.variants:
        m = run_variant(world, f"{args.output}/{v}", v, **extra).metrics
        results[v] = {k: m[k] for k in KEYS}
        print(f"{v:22s}" + "".join(f"{m[k]:14.3f}" for k in KEYS))
    save_summary(results, f"{args.output}/summary.json")


if __name__ == "__main__":
    main()
