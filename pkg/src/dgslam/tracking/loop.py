"""Keyframe gating, loop detection, scale normalization and online global BA."""
from __future__ import annotations

import numpy as np

from ..geometry import Pose
from .ba import run_alternation
from .graph import FactorGraph


def mean_flow_magnitude(target: np.ndarray, weight: np.ndarray) -> float:
    H, W = target.shape[:2]
    v, u = np.mgrid[0:H, 0:W].astype(float)
    ok = weight[..., 0] > 0
    if not ok.any():
        return np.inf
    return float(np.hypot(target[..., 0] - u, target[..., 1] - v)[ok].mean())


def keyframe_gate(flow_provider, last_kf, candidate_frame: int, tau: float) -> bool:
    """Admit ``candidate_frame`` iff its mean flow to the last keyframe exceeds ``tau``."""
    last = last_kf.frame if hasattr(last_kf, "frame") else int(last_kf)
    return flow_provider.mean_flow(candidate_frame, last) > tau


def view_angle(a: Pose, b: Pose) -> float:
    """Angle in degrees between the optical axes of two poses."""
    c = float(np.clip(a.R[:, 2] @ b.R[:, 2], -1.0, 1.0))
    return float(np.degrees(np.arccos(c)))


def detect_loops(graph: FactorGraph, active, flow_provider, tau_loop: float | None = None,
                 tau_t: int | None = None) -> list:
    """Add unidirectional loop edges from active keyframes to distant past ones."""
    cfg = graph.config
    tau_loop = cfg.tau_loop if tau_loop is None else tau_loop
    tau_t = cfg.tau_t if tau_t is None else tau_t
    added = []
    for i in sorted(active):
        ki = graph.keyframes[i]
        for j in range(len(graph.keyframes)):
            if abs(i - j) <= tau_t or graph.has_edge(i, j, "loop"):
                continue
            kj = graph.keyframes[j]
            # current estimates must at least roughly face the same way
            if view_angle(ki.pose, kj.pose) > cfg.loop_view_angle:
                continue
            if flow_provider.mean_flow(ki.frame, kj.frame) < tau_loop:
                graph.add_flow_edge(flow_provider, i, j, "loop")
                added.append(graph.edges[-1])
    return added


def loop_nodes(graph: FactorGraph, active) -> set[int]:
    act = set(active)
    out = set(act)
    for e in graph.edges:
        if e.kind == "loop" and (e.i in act or e.j in act):
            out.update((e.i, e.j))
    return out


def normalize_scale(graph: FactorGraph) -> float:
    """Rescale so the mean valid disparity is 1; translations are multiplied by the old mean."""
    vals = [kf.disparity[kf.valid] for kf in graph.keyframes]
    vals = np.concatenate(vals) if vals else np.zeros(0)
    if vals.size == 0:
        return 1.0
    dbar = float(vals.mean())
    for kf in graph.keyframes:
        kf.disparity = np.where(kf.valid, kf.disparity / dbar, kf.disparity)
        kf.pose = Pose(kf.pose.q, kf.pose.t * dbar)
        kf.scale /= dbar
        kf.shift /= dbar
        if kf.depth_fit is not None:
            kf.depth_fit = (kf.depth_fit[0] * dbar, kf.depth_fit[1] * dbar)
    return dbar


def global_ba_due(n_keyframes: int, every: int) -> bool:
    return every > 0 and n_keyframes > 0 and n_keyframes % every == 0


def build_global_graph(graph: FactorGraph, flow_provider, temporal: int = 2) -> FactorGraph:
    """Temporal edges to the ``temporal`` nearest neighbours plus flow-proximity edges."""
    cfg = graph.config
    n = len(graph.keyframes)
    gg = FactorGraph(graph.K, cfg)
    gg.keyframes = graph.keyframes
    gg.damping = dict(graph.damping)
    for e in graph.edges:
        if abs(e.i - e.j) <= temporal:
            gg.add_edge(e)
    for i in range(n):
        for j in range(max(0, i - temporal), min(n, i + temporal + 1)):
            if i != j and not gg.has_edge(i, j):
                gg.add_flow_edge(flow_provider, i, j, "global")
    limit = 2.0 * cfg.tau_loop
    cand = []
    for i in range(n):
        for j in range(i + temporal + 1, n):
            if view_angle(graph.keyframes[i].pose, graph.keyframes[j].pose) > cfg.loop_view_angle:
                continue
            f = flow_provider.mean_flow(graph.keyframes[i].frame, graph.keyframes[j].frame)
            if f < limit:
                cand.append((f, i, j))
    degree = np.zeros(n, dtype=int)
    for f, i, j in sorted(cand):
        if degree[i] >= cfg.proximity_max_edges or degree[j] >= cfg.proximity_max_edges:
            continue
        for a, b in ((i, j), (j, i)):
            if not gg.has_edge(a, b):
                gg.add_flow_edge(flow_provider, a, b, "global")
        degree[i] += 1
        degree[j] += 1
    return gg


def run_global_ba(graph: FactorGraph, flow_provider, rounds: int | None = None, dspo: bool = True) -> list:
    """Optimize all keyframes over a temporal+proximity graph.

    Returns (kf, old pose, new pose, old depth, new depth) tuples for every keyframe.
    """
    n = len(graph.keyframes)
    if n < 2:
        return []
    cfg = graph.config
    before = [(kf.pose, kf.depth) for kf in graph.keyframes]
    gg = build_global_graph(graph, flow_provider)
    normalize_scale(graph)
    run_alternation(gg, range(n), cfg.global_rounds if rounds is None else rounds,
                    cfg.dba_per_round, fixed={0}, dspo=dspo)
    graph.damping["dba"] = gg.damping["dba"]
    return [(k, before[k][0], kf.pose, before[k][1], kf.depth) for k, kf in enumerate(graph.keyframes)]
