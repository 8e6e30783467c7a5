"""Trajectory and image quality metrics."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DegenerateGeometry, DimensionMismatch, EmptyOverlap
from .geometry import Pose

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def align_sim3(est, gt) -> tuple[float, np.ndarray, np.ndarray]:
    """Umeyama similarity (s, R, t) minimizing sum |gt - (s R est + t)|^2."""
    X = np.asarray(est, dtype=float)
    Y = np.asarray(gt, dtype=float)
    if X.shape != Y.shape:
        raise DimensionMismatch(f"{X.shape} vs {Y.shape}")
    if len(X) < 3:
        raise DegenerateGeometry("need at least three correspondences")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var = float(np.mean(np.sum(Xc * Xc, axis=1)))
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    if var < 1e-18 or np.sum(D > 1e-12 * max(D[0], 1e-300)) < 2:
        raise DegenerateGeometry("correspondences are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var)
    t = my - s * R @ mx
    return s, R, t


def _positions(traj) -> tuple[list, np.ndarray]:
    """Accept {frame: Pose}, a list of (frame, Pose) pairs or an (N, 3) array."""
    if isinstance(traj, dict):
        items = sorted(traj.items())
    elif isinstance(traj, np.ndarray):
        return list(range(len(traj))), np.asarray(traj, dtype=float)
    else:
        items = list(traj)
        if items and isinstance(items[0], Pose):
            items = list(enumerate(items))
    ids = [int(k) for k, _ in items]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError("frame ids must be strictly increasing")
    pos = np.array([p.t if isinstance(p, Pose) else np.asarray(p, dtype=float) for _, p in items])
    return ids, pos.reshape(-1, 3)


def matched_positions(est, gt) -> tuple[np.ndarray, np.ndarray]:
    ie, pe = _positions(est)
    ig, pg = _positions(gt)
    common = sorted(set(ie) & set(ig))
    if not common:
        raise EmptyOverlap("no common frame ids")
    me = {k: n for n, k in enumerate(ie)}
    mg = {k: n for n, k in enumerate(ig)}
    return pe[[me[k] for k in common]], pg[[mg[k] for k in common]]


def ate_rmse(est, gt, align: bool = True) -> float:
    """Absolute trajectory error RMSE in centimeters (after Sim3 alignment when ``align``)."""
    pe, pg = matched_positions(est, gt)
    if align:
        s, R, t = align_sim3(pe, pg)
        pe = s * pe @ R.T + t
    return float(np.sqrt(np.mean(np.sum((pe - pg) ** 2, axis=1)))) * 100.0


def psnr(rendered, reference) -> float:
    a = np.asarray(rendered, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img, w):
    return correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def ssim(rendered, reference) -> float:
    """Mean SSIM over valid (fully inside) 11x11 Gaussian windows, averaged over channels."""
    a = np.asarray(rendered, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise DimensionMismatch("image smaller than the SSIM window")
    w = gaussian_window()
    r = SSIM_WINDOW // 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter(x, w), _filter(y, w)
        sxx = _filter(x * x, w) - mx * mx
        syy = _filter(y * y, w) - my * my
        sxy = _filter(x * y, w) - mx * my
        m = ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2))
        vals.append(m[r:H - r, r:W - r].mean())
    return float(np.mean(vals))


def depth_l1(rendered_depth, gt_depth, valid=None) -> float:
    """Mean absolute depth error in centimeters over pixels where both depths are valid."""
    a = np.asarray(rendered_depth, dtype=float)
    b = np.asarray(gt_depth, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    ok = np.isfinite(a) & np.isfinite(b) & (a > 0) & (b > 0)
    if valid is not None:
        ok &= valid
    if not ok.any():
        raise EmptyOverlap("no pixel has both depths valid")
    return float(np.mean(np.abs(a[ok] - b[ok]))) * 100.0


def image_metrics(rendered, reference, rendered_depth=None, gt_depth=None) -> tuple[float, float, float]:
    """(PSNR dB, SSIM, depth L1 cm); depth L1 is nan when no depths are given."""
    dl1 = np.nan if rendered_depth is None else depth_l1(rendered_depth, gt_depth)
    return psnr(rendered, reference), ssim(rendered, reference), dl1
