"""Trajectory error with and without loop closure on a drifting full-turn sequence."""
import argparse

from dgslam.experiments import loop_world, run_variant, save_summary, tracking_only_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--output", default="results/loop_closure")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = p.parse_args()
    results = {}
    for seed in args.seeds:
        world = loop_world(seed)
        for variant in ("full", "no_loop_closure"):
            rep = run_variant(world, f"{args.output}/seed{seed}/{variant}", variant, seed=seed,
                              cfg=tracking_only_config())
            results[f"seed{seed}/{variant}"] = rep.metrics["ate_rmse_cm"]
            print(f"seed {seed} {variant:16s} ATE {rep.metrics['ate_rmse_cm']:.3f} cm "
                  f"({rep.stats.loop_edges} loop edges, {rep.stats.global_ba} global BA)")
    save_summary(results, f"{args.output}/summary.json")


if __name__ == "__main__":
    main()
