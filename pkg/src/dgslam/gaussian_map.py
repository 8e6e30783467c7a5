"""Gaussian scene container: anchoring, densification, pruning and deformation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyDepth, IoError
from .geometry import Intrinsics, Pose, quat_multiply, quat_to_rotmat

SH_C0 = 0.28209479177387814
PLY_FIELDS = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")

FIRST_FRAME_DOWNSAMPLE = 16
DOWNSAMPLE = 32
PRUNE_EVERY = 150
MIN_OPACITY = 0.7
DENSIFY_GRAD = 0.0002
LARGE_RADIUS_FRAC = 0.2
PERCENT_DENSE = 0.01
NN_SCALE_RANGE = (1e-4, 1.0)
NN_SCALE_FACTOR = 0.5


@dataclass
class Gaussian:
    mean: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    logit_opacity: float
    color: np.ndarray
    anchor_kf: int = -1
    birth_kf: int = -1

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit_opacity)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.quat)
        return R @ np.diag(self.scale ** 2) @ R.T


class GaussianMap:
    """Structure-of-arrays set of Gaussians.

    Extra per-Gaussian arrays (optimizer moments, gradient statistics) live in
    ``state`` and follow every insert and prune.
    """

    def __init__(self, seed: int = 0):
        self.means = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.logit_opacity = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.anchor_kf = np.zeros(0, dtype=np.int64)
        self.birth_kf = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)
        self.state: dict[str, np.ndarray] = {}
        self.next_id = 0
        self.rng = np.random.default_rng(seed)
        self.grad_accum = np.zeros(0)
        self.grad_count = np.zeros(0)

    _FIELDS = ("means", "quats", "log_scales", "logit_opacity", "colors", "anchor_kf", "birth_kf", "ids",
               "grad_accum", "grad_count")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.quats[i].copy(), self.log_scales[i].copy(),
                        float(self.logit_opacity[i]), self.colors[i].copy(), int(self.anchor_kf[i]),
                        int(self.birth_kf[i]))

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacity))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianMap":
        out = GaussianMap()
        for name in self._FIELDS:
            setattr(out, name, getattr(self, name).copy())
        out.state = {k: v.copy() for k, v in self.state.items()}
        out.next_id = self.next_id
        out.rng = np.random.default_rng(self.rng.integers(2 ** 63))
        return out

    def anchored(self, kf: int) -> np.ndarray:
        return np.flatnonzero(self.anchor_kf == kf)

    def anchor_index(self) -> dict[int, np.ndarray]:
        return {int(k): self.ids[self.anchor_kf == k] for k in np.unique(self.anchor_kf)}

    def append(self, means, quats, log_scales, logit_opacity, colors, anchor_kf, birth_kf) -> np.ndarray:
        """Add Gaussians; returns their new ids."""
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k = len(means)
        quats = np.broadcast_to(np.asarray(quats, dtype=float), (k, 4))
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        new_ids = np.arange(self.next_id, self.next_id + k)
        self.next_id += k
        self.means = np.concatenate([self.means, means])
        self.quats = np.concatenate([self.quats, quats])
        self.log_scales = np.concatenate([self.log_scales, np.broadcast_to(log_scales, (k, 3))])
        self.logit_opacity = np.concatenate([self.logit_opacity, np.broadcast_to(logit_opacity, (k,))])
        self.colors = np.concatenate([self.colors, np.broadcast_to(colors, (k, 3))])
        self.anchor_kf = np.concatenate([self.anchor_kf, np.broadcast_to(anchor_kf, (k,)).astype(np.int64)])
        self.birth_kf = np.concatenate([self.birth_kf, np.broadcast_to(birth_kf, (k,)).astype(np.int64)])
        self.ids = np.concatenate([self.ids, new_ids])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(k)])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(k)])
        for name, arr in self.state.items():
            self.state[name] = np.concatenate([arr, np.zeros((k,) + arr.shape[1:])])
        return new_ids

    def add(self, g: Gaussian) -> int:
        return int(self.append(g.mean, g.quat, g.log_scale, g.logit_opacity, g.color, g.anchor_kf,
                               g.birth_kf)[0])

    def keep(self, mask: np.ndarray) -> int:
        """Retain Gaussians where ``mask`` is true; returns the number removed."""
        mask = np.asarray(mask, dtype=bool)
        for name in self._FIELDS:
            setattr(self, name, getattr(self, name)[mask])
        for name in self.state:
            self.state[name] = self.state[name][mask]
        return int((~mask).sum())

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)


def subsample_stride(downsample: int) -> int:
    return max(1, int(np.floor(np.sqrt(downsample))))


def anchor_gaussians(gmap: GaussianMap, kf_id: int, pose: Pose, image: np.ndarray, proxy_depth: np.ndarray,
                     K: Intrinsics, downsample: int = DOWNSAMPLE, valid: np.ndarray | None = None) -> int:
    """Seed Gaussians from a keyframe's depth on a regular grid of stride floor(sqrt(downsample))."""
    if downsample < 1:
        raise ValueError("downsample factor must be >= 1")
    depth = np.asarray(proxy_depth, dtype=float)
    ok = np.isfinite(depth) & (depth > 0)
    if valid is not None:
        ok &= valid
    s = subsample_stride(downsample)
    grid = np.zeros_like(ok)
    grid[::s, ::s] = True
    vs, us = np.nonzero(ok & grid)
    if len(us) == 0:
        raise EmptyDepth(f"keyframe {kf_id} has no valid depth to anchor")
    d = depth[vs, us]
    pts_cam = np.stack([(us - K.cx) / K.fx * d, (vs - K.cy) / K.fy * d, d], axis=1)
    pts = pts_cam @ pose.R.T + pose.t
    if len(pts) > 1:
        dist, _ = cKDTree(pts).query(pts, k=2)
        nn = dist[:, 1]
    else:
        nn = np.array([np.inf])
    nn = np.clip(NN_SCALE_FACTOR * nn, *NN_SCALE_RANGE)
    log_s = np.repeat(np.log(nn)[:, None], 3, axis=1)
    colors = np.asarray(image, dtype=float)[vs, us]
    gmap.append(pts, np.array([1.0, 0, 0, 0]), log_s, 0.0, colors, kf_id, kf_id)
    return len(pts)


def projected_radius(gmap: GaussianMap, pose: Pose, K: Intrinsics) -> np.ndarray:
    """3-sigma image radius of every Gaussian seen from ``pose`` (0 when culled)."""
    from .rasterizer import project_splats

    sp = project_splats(gmap.means, gmap.quats, gmap.log_scales, gmap.logit_opacity, gmap.colors, gmap.ids,
                        pose, K)
    out = np.zeros(len(gmap))
    out[sp.index] = sp.radius
    return out


def densify_and_prune(gmap: GaussianMap, window: list[int], iteration: int, *, K: Intrinsics | None = None,
                      poses: dict[int, Pose] | None = None, visibility: dict[int, np.ndarray] | None = None,
                      window_full: bool = False, scene_extent: float = 1.0,
                      grad_threshold: float = DENSIFY_GRAD, prune_every: int = PRUNE_EVERY) -> tuple[int, int]:
    """Scheduled map maintenance. Returns (added, removed).

    ``visibility`` maps keyframe id to a boolean mask over the current Gaussians.
    Nothing happens unless ``iteration`` is a positive multiple of ``prune_every``.
    """
    if iteration <= 0 or iteration % prune_every != 0:
        return 0, 0
    keep = gmap.opacity >= MIN_OPACITY
    if K is not None and poses:
        for kf in window:
            if kf in poses:
                keep &= projected_radius(gmap, poses[kf], K) <= LARGE_RADIUS_FRAC * K.width
    if window_full and visibility and window:
        keep &= ~_unseen_recent(gmap, window, visibility)
    removed = gmap.keep(keep)

    # densify by averaged image-space positional gradient, as in 3DGS
    added = 0
    avg = np.where(gmap.grad_count > 0, gmap.grad_accum / np.maximum(gmap.grad_count, 1), 0.0)
    big = avg >= grad_threshold
    max_scale = gmap.scales.max(axis=1) if len(gmap) else np.zeros(0)
    clone = big & (max_scale <= PERCENT_DENSE * scene_extent)
    split = big & ~clone
    if clone.any():
        idx = np.flatnonzero(clone)
        gmap.append(gmap.means[idx], gmap.quats[idx], gmap.log_scales[idx], gmap.logit_opacity[idx],
                    gmap.colors[idx], gmap.anchor_kf[idx], gmap.birth_kf[idx])
        added += len(idx)
    if split.any():
        idx = np.flatnonzero(split)
        R = quat_to_rotmat(gmap.quats[idx])
        s = gmap.scales[idx]
        for _ in range(2):
            local = gmap.rng.normal(size=(len(idx), 3)) * s
            gmap.append(gmap.means[idx] + np.einsum("nij,nj->ni", R, local), gmap.quats[idx],
                        gmap.log_scales[idx] - np.log(1.6), gmap.logit_opacity[idx], gmap.colors[idx],
                        gmap.anchor_kf[idx], gmap.birth_kf[idx])
        added += 2 * len(idx)
        mask = np.ones(len(gmap), bool)
        mask[idx] = False
        removed += gmap.keep(mask)
    gmap.grad_accum[:] = 0
    gmap.grad_count[:] = 0
    return added, removed


def _unseen_recent(gmap, window, visibility, min_views=3, recent=3):
    counts = np.zeros(len(gmap), dtype=int)
    for kf in window:
        vis = np.asarray(visibility.get(kf, np.zeros(len(gmap), bool)), dtype=bool)
        counts += vis & (gmap.birth_kf != kf)
    fresh = np.isin(gmap.birth_kf, list(window[-recent:]))
    return fresh & (counts < min_views)


def prune_by_visibility(gmap: GaussianMap, window: list[int], visibility: dict[int, np.ndarray],
                        min_views: int = 3, recent: int = 3) -> int:
    """Remove Gaussians born in the last ``recent`` window keyframes seen by fewer than ``min_views`` others."""
    return gmap.keep(~_unseen_recent(gmap, window, visibility, min_views, recent))


class DeformUpdate(NamedTuple):
    kf: int
    old_pose: Pose
    new_pose: Pose
    old_depth: np.ndarray | None
    new_depth: np.ndarray | None


def deform_map(gmap: GaussianMap, updates, K: Intrinsics) -> int:
    """Move Gaussians anchored to updated keyframes with their keyframe's pose and depth.

    Gaussians landing on a pixel with valid old and new depth are pushed along
    the optical axis by the depth change and rescaled by the same factor;
    all others move rigidly with the keyframe.
    """
    count = 0
    for up in updates:
        upd = up if isinstance(up, DeformUpdate) else DeformUpdate(*up)
        idx = gmap.anchored(upd.kf)
        if len(idx) == 0:
            continue
        R, t = upd.old_pose.R, upd.old_pose.t
        R2, t2 = upd.new_pose.R, upd.new_pose.t
        mu_c = (gmap.means[idx] - t) @ R
        z = mu_c[:, 2]
        factor = np.ones(len(idx))
        if upd.old_depth is not None and upd.new_depth is not None:
            H, W = K.height, K.width
            zs = np.where(z > 1e-8, z, 1.0)
            u = np.rint(K.fx * mu_c[:, 0] / zs + K.cx).astype(np.int64)
            v = np.rint(K.fy * mu_c[:, 1] / zs + K.cy).astype(np.int64)
            inside = (z > 1e-8) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
            uc, vc = np.clip(u, 0, W - 1), np.clip(v, 0, H - 1)
            D = upd.old_depth[vc, uc]
            D2 = upd.new_depth[vc, uc]
            ok = inside & np.isfinite(D) & np.isfinite(D2) & (D > 0) & (D2 > 0)
            f = 1.0 + np.where(ok, D2 - D, 0.0) / zs
            ok &= f > 0
            factor = np.where(ok, f, 1.0)
        gmap.means[idx] = (factor[:, None] * mu_c) @ R2.T + t2
        q_rel = quat_multiply(upd.new_pose.q, upd.old_pose.q * np.array([1.0, -1.0, -1.0, -1.0]))
        gmap.quats[idx] = quat_multiply(np.broadcast_to(q_rel, (len(idx), 4)), gmap.quats[idx])
        gmap.log_scales[idx] += np.log(factor)[:, None]
        count += len(idx)
    gmap.normalize_quats()
    return count


def write_ply(gmap: GaussianMap, path) -> None:
    """Binary little-endian PLY in the common 3DGS vertex layout (colors stored as SH DC terms)."""
    n = len(gmap)
    data = np.zeros((n, len(PLY_FIELDS)), dtype="<f4")
    data[:, 0:3] = gmap.means
    data[:, 6:9] = (gmap.colors - 0.5) / SH_C0
    data[:, 9] = gmap.logit_opacity
    data[:, 10:13] = gmap.log_scales
    data[:, 13:17] = gmap.quats
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_ply(path) -> GaussianMap:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise IoError("not a binary little-endian PLY")
    n = int(next(ln.split()[-1] for ln in lines if ln.startswith("element vertex")))
    names = [ln.split()[-1] for ln in lines if ln.startswith("property")]
    if tuple(names) != PLY_FIELDS:
        raise IoError(f"unexpected vertex layout {names}")
    data = np.frombuffer(raw[end:end + 4 * n * len(names)], dtype="<f4").reshape(n, len(names)).astype(float)
    gmap = GaussianMap()
    gmap.append(data[:, 0:3], data[:, 13:17], data[:, 10:13], data[:, 9], data[:, 6:9] * SH_C0 + 0.5, -1, -1)
    return gmap

