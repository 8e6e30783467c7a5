"""Global two-view depth consistency of keyframe disparities."""
from __future__ import annotations

import numpy as np

from .graph import FactorGraph


def warp_points(graph: FactorGraph, i: int) -> tuple[np.ndarray, np.ndarray]:
    """World points of every pixel of keyframe ``i`` and their validity."""
    kf = graph.keyframes[i]
    D = kf.depth.ravel()
    ok = np.isfinite(D)
    X = graph.rays * np.where(ok, D, 0.0)[:, None]
    return X @ kf.pose.R.T + kf.pose.t, ok


def classify_disparities(graph: FactorGraph, i: int, eta: float | None = None,
                         threshold: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel count of agreeing keyframes and the resulting low-error mask.

    A pixel of ``i`` agrees with keyframe k when its world point, warped into k
    and re-lifted with k's depth at the nearest landing pixel, lies within
    ``eta * mean(depth_i)`` of itself.
    """
    cfg = graph.config
    eta = cfg.eta if eta is None else eta
    threshold = cfg.n_consistency if threshold is None else threshold
    K = graph.K
    H, W = K.height, K.width
    kf = graph.keyframes[i]
    Pw, ok = warp_points(graph, i)
    count = np.zeros(H * W, dtype=np.int64)
    if ok.any():
        tol = eta * float(np.mean(kf.depth.ravel()[ok]))
        for k, other in enumerate(graph.keyframes):
            if k == i:
                continue
            Xc = (Pw - other.pose.t) @ other.pose.R
            z = Xc[:, 2]
            front = ok & (z > 0)
            zs = np.where(front, z, 1.0)
            u = np.floor(K.fx * Xc[:, 0] / zs + K.cx + 0.5)
            v = np.floor(K.fy * Xc[:, 1] / zs + K.cy + 0.5)
            inb = front & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
            idx = np.where(inb, v * W + u, 0).astype(np.int64)
            Dk = other.depth.ravel()[idx]
            inb &= np.isfinite(Dk)
            Pk = graph.rays[idx] * np.where(inb, Dk, 0.0)[:, None] @ other.pose.R.T + other.pose.t
            agree = inb & (np.linalg.norm(Pw - Pk, axis=1) < tol)
            count += agree
    count = count.reshape(H, W)
    low = count >= threshold
    kf.consistency, kf.low_error = count, low
    return count, low
