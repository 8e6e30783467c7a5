"""Differentiable splatting of a Gaussian map into color and depth images.

Forward: project every Gaussian to an image-plane ellipse, sort by camera
depth of the mean, bin into 16x16 tiles and composite front to back.
Backward: exact adjoint of the forward pass, including the projection of
the 3D covariance, for means, rotations (right tangent), log-scales,
logit-opacities, colors and the affine exposure (a, b).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import Intrinsics, Pose, quat_to_rotmat

TILE = 16
DILATION = 0.3
NEAR = 0.05
GUARD = 0.3  # cull means projecting this fraction of the image size beyond its border
CUTOFF_SIGMA = 3.0
T_EPS = 1e-4
OPACITY_MIN = 1e-4
OPACITY_MAX = 1.0 - 1e-4
VISIBLE_T = 0.5


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    visible: np.ndarray
    raw_color: np.ndarray | None = None
    n_contrib: np.ndarray | None = None
    _ctx: object = field(default=None, repr=False)

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha


@dataclass
class GradientBuffer:
    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    logit_opacity: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray
    exposure: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros((n, 2)))

    def __iadd__(self, other: "GradientBuffer") -> "GradientBuffer":
        for name in ("means", "rotations", "log_scales", "logit_opacity", "colors", "mean2d"):
            getattr(self, name)[...] += getattr(other, name)
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n))) for n in
                   ("means", "rotations", "log_scales", "logit_opacity", "colors", "exposure"))


@dataclass
class Splats:
    """Per-Gaussian screen-space quantities for the Gaussians that survive culling."""

    index: np.ndarray       # map index of each surviving Gaussian, in depth order
    t_cam: np.ndarray       # camera-frame means
    mean2d: np.ndarray
    cov2d: np.ndarray       # 2x2 after dilation
    conic: np.ndarray       # (a, b, c) of the inverse covariance
    radius: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    J: np.ndarray
    M: np.ndarray           # J @ R_cw
    cov3d: np.ndarray
    Rg: np.ndarray
    scales: np.ndarray
    opacity_clipped: np.ndarray


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _world_to_cam(pose: Pose):
    R = pose.R
    return R.T, -R.T @ pose.t


def project_splats(means, quats, log_scales, logit_opacity, colors, ids, pose: Pose, K: Intrinsics) -> Splats:
    """Vectorized splatting of all Gaussians; culls by near plane, guard band and image footprint."""
    n = len(means)
    R_cw, t_cw = _world_to_cam(pose)
    t_c = means @ R_cw.T + t_cw if n else np.zeros((0, 3))
    z = t_c[:, 2]
    keep = z > NEAR
    idx = np.flatnonzero(keep)
    t_c = t_c[idx]
    z = t_c[:, 2]
    x, y = t_c[:, 0], t_c[:, 1]
    m = len(idx)

    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    M = J @ R_cw
    Rg = quat_to_rotmat(quats[idx]) if m else np.zeros((0, 3, 3))
    s = np.exp(log_scales[idx])
    cov3d = (Rg * (s ** 2)[:, None, :]) @ np.swapaxes(Rg, 1, 2)
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = CUTOFF_SIGMA * np.sqrt(lam_max)
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)

    gw, gh = GUARD * K.width, GUARD * K.height
    on_image = ((mean2d[:, 0] >= -gw) & (mean2d[:, 0] <= K.width - 1 + gw)
                & (mean2d[:, 1] >= -gh) & (mean2d[:, 1] <= K.height - 1 + gh)
                & (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= K.width - 1)
                & (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= K.height - 1))
    raw_o = sigmoid(logit_opacity[idx])
    o = np.clip(raw_o, OPACITY_MIN, OPACITY_MAX)
    clipped = (raw_o < OPACITY_MIN) | (raw_o > OPACITY_MAX)

    sel = np.flatnonzero(on_image)
    order = sel[np.lexsort((ids[idx][sel], z[sel]))]
    return Splats(idx[order], t_c[order], mean2d[order], cov2d[order], conic[order], radius[order],
                  o[order], colors[idx][order], J[order], M[order], cov3d[order], Rg[order], s[order],
                  clipped[order])


def splat_project(mean, quat, log_scale, pose: Pose, K: Intrinsics):
    """Project one Gaussian. Returns (mean2d, cov2d, z) or None when culled."""
    sp = project_splats(np.asarray(mean, float)[None], np.asarray(quat, float)[None],
                        np.asarray(log_scale, float)[None], np.zeros(1), np.zeros((1, 3)),
                        np.zeros(1, dtype=np.int64), pose, K)
    if len(sp.index) == 0:
        return None
    return sp.mean2d[0], sp.cov2d[0], float(sp.t_cam[0, 2])


@numba.njit(cache=True)
def _bin_tiles(mean2d, radius, width, height, tile):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = mean2d.shape[0]
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    counts = np.zeros(tiles_x * tiles_y + 1, np.int64)
    for g in range(n):
        x0[g] = max(0, int(np.floor((mean2d[g, 0] - radius[g]) / tile)))
        x1[g] = min(tiles_x - 1, int(np.floor((mean2d[g, 0] + radius[g]) / tile)))
        y0[g] = max(0, int(np.floor((mean2d[g, 1] - radius[g]) / tile)))
        y1[g] = min(tiles_y - 1, int(np.floor((mean2d[g, 1] + radius[g]) / tile)))
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    # gaussians arrive in depth order, so every tile list is depth sorted
    for g in range(n):
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists


@numba.njit(cache=True)
def _bbox(mx, my, r, x0, x1, y0, y1):
    # pixel-center bounding box of a radius-r disc, clipped to [x0, x1) x [y0, y1)
    a = max(x0, int(np.ceil(mx - r)))
    b = min(x1 - 1, int(np.floor(mx + r)))
    c = max(y0, int(np.ceil(my - r)))
    d = min(y1 - 1, int(np.floor(my + r)))
    return a, b, c, d


@numba.njit(cache=True)
def _composite(width, height, tile, offsets, lists, mean2d, conic, radius, opacity, colors, depths):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    n_contrib = np.zeros((height, width), np.int64)
    done = np.zeros((height, width), np.bool_)
    visible = np.zeros(mean2d.shape[0], np.bool_)
    max_sigma2 = CUTOFF_SIGMA * CUTOFF_SIGMA
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            X0, X1 = tx * tile, min(width, (tx + 1) * tile)
            Y0, Y1 = ty * tile, min(height, (ty + 1) * tile)
            remaining = (X1 - X0) * (Y1 - Y0)
            # Gaussian-major: each Gaussian only visits pixels inside its bounding box
            for k in range(offsets[t], offsets[t + 1]):
                g = lists[k]
                mx, my = mean2d[g, 0], mean2d[g, 1]
                ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
                o = opacity[g]
                a, b, c, d = _bbox(mx, my, radius[g], X0, X1, Y0, Y1)
                for py in range(c, d + 1):
                    dy = py - my
                    for px in range(a, b + 1):
                        if done[py, px]:
                            continue
                        dx = px - mx
                        m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        if m2 > max_sigma2:
                            continue
                        alpha = o * np.exp(-0.5 * m2)
                        T = trans[py, px]
                        if T > VISIBLE_T:
                            visible[g] = True
                        w = alpha * T
                        color[py, px, 0] += colors[g, 0] * w
                        color[py, px, 1] += colors[g, 1] * w
                        color[py, px, 2] += colors[g, 2] * w
                        depth[py, px] += depths[g] * w
                        T *= 1.0 - alpha
                        trans[py, px] = T
                        n_contrib[py, px] = k - offsets[t] + 1
                        if T < T_EPS:
                            done[py, px] = True
                            remaining -= 1
                if remaining == 0:
                    break
    return color, depth, trans, n_contrib, visible


@numba.njit(cache=True)
def _composite_backward(width, height, tile, offsets, lists, n_contrib, trans, mean2d, conic, radius,
                        opacity, colors, depths, dL_dC, dL_dD):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n = mean2d.shape[0]
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_colors = np.zeros((n, 3))
    g_depths = np.zeros(n)
    max_sigma2 = CUTOFF_SIGMA * CUTOFF_SIGMA
    # per-pixel running transmittance and normalized color/depth of everything behind
    T_cur = trans.copy()
    S = np.zeros((height, width, 4))
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            X0, X1 = tx * tile, min(width, (tx + 1) * tile)
            Y0, Y1 = ty * tile, min(height, (ty + 1) * tile)
            start = offsets[t]
            last = 0
            for py in range(Y0, Y1):
                for px in range(X0, X1):
                    last = max(last, n_contrib[py, px])
            for k in range(start + last - 1, start - 1, -1):
                g = lists[k]
                mx, my = mean2d[g, 0], mean2d[g, 1]
                ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
                o = opacity[g]
                cr, cg_, cbl, dg = colors[g, 0], colors[g, 1], colors[g, 2], depths[g]
                a, b, c, d = _bbox(mx, my, radius[g], X0, X1, Y0, Y1)
                acc_m0 = 0.0
                acc_m1 = 0.0
                acc_c0 = 0.0
                acc_c1 = 0.0
                acc_c2 = 0.0
                acc_o = 0.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                for py in range(c, d + 1):
                    dy = py - my
                    for px in range(a, b + 1):
                        if k - start >= n_contrib[py, px]:
                            continue
                        dx = px - mx
                        m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        if m2 > max_sigma2:
                            continue
                        G = np.exp(-0.5 * m2)
                        alpha = o * G
                        Tj = T_cur[py, px] / (1.0 - alpha)
                        T_cur[py, px] = Tj
                        w = alpha * Tj
                        gr = dL_dC[py, px, 0]
                        gg = dL_dC[py, px, 1]
                        gb = dL_dC[py, px, 2]
                        gd = dL_dD[py, px]
                        acc_r += gr * w
                        acc_g += gg * w
                        acc_b += gb * w
                        acc_d += gd * w
                        sr = S[py, px, 0]
                        sg = S[py, px, 1]
                        sb = S[py, px, 2]
                        sd = S[py, px, 3]
                        dL_dalpha = Tj * (gr * (cr - sr) + gg * (cg_ - sg) + gb * (cbl - sb) + gd * (dg - sd))
                        S[py, px, 0] = cr * alpha + (1.0 - alpha) * sr
                        S[py, px, 1] = cg_ * alpha + (1.0 - alpha) * sg
                        S[py, px, 2] = cbl * alpha + (1.0 - alpha) * sb
                        S[py, px, 3] = dg * alpha + (1.0 - alpha) * sd
                        acc_o += dL_dalpha * G
                        dL_dpower = dL_dalpha * alpha
                        acc_m0 += dL_dpower * (ca * dx + cb * dy)
                        acc_m1 += dL_dpower * (cb * dx + cc * dy)
                        acc_c0 += dL_dpower * (-0.5 * dx * dx)
                        acc_c1 += dL_dpower * (-dx * dy)
                        acc_c2 += dL_dpower * (-0.5 * dy * dy)
                g_colors[g, 0] += acc_r
                g_colors[g, 1] += acc_g
                g_colors[g, 2] += acc_b
                g_depths[g] += acc_d
                g_opacity[g] += acc_o
                g_mean2d[g, 0] += acc_m0
                g_mean2d[g, 1] += acc_m1
                g_conic[g, 0] += acc_c0
                g_conic[g, 1] += acc_c1
                g_conic[g, 2] += acc_c2
    return g_mean2d, g_conic, g_opacity, g_colors, g_depths


@dataclass
class _Context:
    splats: Splats
    offsets: np.ndarray
    lists: np.ndarray
    n_contrib: np.ndarray
    raw_color: np.ndarray
    n_total: int
    trans: np.ndarray | None = None


def _map_arrays(gmap):
    return (gmap.means, gmap.quats, gmap.log_scales, gmap.logit_opacity, gmap.colors, gmap.ids)


def apply_exposure(raw_color, exposure):
    a, b = (1.0, 0.0) if exposure is None else exposure
    return np.clip(a * raw_color + b, 0.0, 1.0)


def render(gmap, pose: Pose, K: Intrinsics, exposure=None) -> RenderOutput:
    """Render color, depth and accumulated opacity of ``gmap`` seen from camera-to-world ``pose``."""
    n = len(gmap)
    H, W = K.height, K.width
    splats = project_splats(*_map_arrays(gmap), pose, K)
    if len(splats.index) == 0:
        raw = np.zeros((H, W, 3))
        ctx = _Context(splats, np.zeros(1, np.int64), np.zeros(0, np.int64), np.zeros((H, W), np.int64), raw, n)
        return RenderOutput(apply_exposure(raw, exposure), np.zeros((H, W)), np.zeros((H, W)),
                            np.zeros(n, bool), raw, ctx.n_contrib, ctx)
    offsets, lists = _bin_tiles(splats.mean2d, splats.radius, W, H, TILE)
    raw, depth, trans, n_contrib, vis = _composite(W, H, TILE, offsets, lists, splats.mean2d, splats.conic,
                                                   splats.radius, splats.opacity, splats.colors,
                                                   splats.t_cam[:, 2].copy())
    visible = np.zeros(n, bool)
    visible[splats.index[vis]] = True
    ctx = _Context(splats, offsets, lists, n_contrib, raw, n, trans)
    return RenderOutput(apply_exposure(raw, exposure), depth, 1.0 - trans, visible, raw, n_contrib, ctx)


def render_gradients(gmap, pose: Pose, K: Intrinsics, dL_dC, dL_dD, exposure=None,
                     output: RenderOutput | None = None) -> GradientBuffer:
    """Gradient of sum(dL_dC * color + dL_dD * depth) w.r.t. all Gaussian attributes and exposure.

    ``output`` may be the RenderOutput of the matching forward call to skip re-rendering.
    """
    if output is None or output._ctx is None:
        output = render(gmap, pose, K, exposure)
    ctx: _Context = output._ctx
    n = len(gmap)
    grads = GradientBuffer.zeros(n)
    dL_dC = np.asarray(dL_dC, dtype=float)
    dL_dD = np.asarray(dL_dD, dtype=float)
    a, b = (1.0, 0.0) if exposure is None else exposure
    pre = a * ctx.raw_color + b
    inside = (pre > 0.0) & (pre < 1.0)
    dC_raw = np.where(inside, dL_dC * a, 0.0)
    grads.exposure = np.array([np.sum(np.where(inside, dL_dC * ctx.raw_color, 0.0)),
                               np.sum(np.where(inside, dL_dC, 0.0))])
    sp = ctx.splats
    if len(sp.index) == 0:
        return grads
    H, W = K.height, K.width
    g2d, gconic, gop, gcol, gdep = _composite_backward(
        W, H, TILE, ctx.offsets, ctx.lists, ctx.n_contrib, ctx.trans, sp.mean2d, sp.conic, sp.radius,
        sp.opacity, sp.colors,
        sp.t_cam[:, 2].copy(), np.ascontiguousarray(dC_raw), np.ascontiguousarray(dL_dD))

    # conic -> 2D covariance
    Q = np.empty((len(sp.index), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = sp.conic[:, 0], sp.conic[:, 1], sp.conic[:, 1], sp.conic[:, 2]
    Gq = np.empty_like(Q)
    Gq[:, 0, 0], Gq[:, 1, 1] = gconic[:, 0], gconic[:, 2]
    Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * gconic[:, 1]
    G2 = -Q @ Gq @ Q
    # 2D covariance -> M = J R_cw and 3D covariance
    MT = np.swapaxes(sp.M, 1, 2)
    dM = 2.0 * G2 @ sp.M @ sp.cov3d
    G3 = MT @ G2 @ sp.M
    R_cw, _ = _world_to_cam(pose)
    dJ = dM @ R_cw.T
    # 3D covariance -> rotation and scale
    s2 = sp.scales ** 2
    dRg = 2.0 * G3 @ sp.Rg * s2[:, None, :]
    A = np.swapaxes(sp.Rg, 1, 2) @ dRg
    drot = np.stack([A[:, 2, 1] - A[:, 1, 2], A[:, 0, 2] - A[:, 2, 0], A[:, 1, 0] - A[:, 0, 1]], axis=1)
    RtGR = np.swapaxes(sp.Rg, 1, 2) @ G3 @ sp.Rg
    dlogs = 2.0 * s2 * np.diagonal(RtGR, axis1=1, axis2=2)
    # J and projected mean and depth -> camera-frame mean
    x, y, z = sp.t_cam[:, 0], sp.t_cam[:, 1], sp.t_cam[:, 2]
    fx, fy = K.fx, K.fy
    dt = np.zeros((len(sp.index), 3))
    dt[:, 0] = g2d[:, 0] * fx / z - dJ[:, 0, 2] * fx / z ** 2
    dt[:, 1] = g2d[:, 1] * fy / z - dJ[:, 1, 2] * fy / z ** 2
    dt[:, 2] = (gdep - g2d[:, 0] * fx * x / z ** 2 - g2d[:, 1] * fy * y / z ** 2
                - dJ[:, 0, 0] * fx / z ** 2 + dJ[:, 0, 2] * 2 * fx * x / z ** 3
                - dJ[:, 1, 1] * fy / z ** 2 + dJ[:, 1, 2] * 2 * fy * y / z ** 3)
    dmean = dt @ R_cw
    o = sp.opacity
    dlogit = np.where(sp.opacity_clipped, 0.0, gop * o * (1.0 - o))

    idx = sp.index
    grads.means[idx] = dmean
    grads.rotations[idx] = drot
    grads.log_scales[idx] = dlogs
    grads.logit_opacity[idx] = dlogit
    grads.colors[idx] = gcol
    grads.mean2d[idx] = g2d
    return grads
