"""Reference synthetic experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .frontend_sim import generate_world, room_spec
from .pipeline import RunReport, run_pipeline

# closed-loop reconstruction: 30 keyframes over three quarters of a turn
CLOSED_LOOP = dict(n_frames=30, arc=0.75 * 2 * np.pi, flow_sigma=0.25, mono=(1.5, 0.2, 0.01))
# loop closure: a full turn with biased (drifting) flow
LOOP = dict(n_frames=40, arc=2 * np.pi, flow_sigma=0.5, mono=(1.5, 0.2, 0.01), drift=0.003)

ABLATIONS = {
    "full": {},
    "no_mono_depth": {"mono_depth": False},
    "no_multiview_filter": {"multiview_filter": False},
    "no_deform": {"deform": False},
    "no_loop_closure": {"loop_closure": False},
}


def closed_loop_world(seed: int = 0):
    return generate_world(room_spec(seed=seed, **CLOSED_LOOP))


def loop_world(seed: int = 0):
    return generate_world(room_spec(seed=seed, **LOOP))


def run_variant(world, output, variant: str = "full", seed: int = 0, cfg: RunConfig | None = None,
                **mapping) -> RunReport:
    """Run the pipeline on ``world`` with one ablation switch flipped."""
    cfg = dataclasses.replace(cfg) if cfg is not None else RunConfig()
    cfg.run = dataclasses.replace(cfg.run, output=str(output), seed=seed, **ABLATIONS[variant])
    cfg.mapping = dataclasses.replace(cfg.mapping, **mapping)
    return run_pipeline(cfg, world)


def tracking_only_config() -> RunConfig:
    """Default config with a minimal mapping budget (trajectory experiments)."""
    cfg = RunConfig()
    cfg.mapping.map_iters = 2
    cfg.mapping.beta = 0
    return cfg


def save_summary(results: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
