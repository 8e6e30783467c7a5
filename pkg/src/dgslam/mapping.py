"""Gaussian map optimization over a covisibility window of keyframes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingProxyDepth
from .gaussian_map import (DENSIFY_GRAD, DOWNSAMPLE, FIRST_FRAME_DOWNSAMPLE, PRUNE_EVERY, GaussianMap,
                           densify_and_prune)
from .geometry import Intrinsics, Pose, quat_multiply, rotvec_to_quat
from .rasterizer import GradientBuffer, render, render_gradients

VISIBLE_ALPHA = 0.5


@dataclass
class MappingConfig:
    lam: float = 0.8
    lambda_reg: float = 10.0
    map_iters: int = 60
    lr_means: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_exposure: float = 1e-3
    kf_cov: float = 0.95
    kf_m: float = 0.04
    kf_c: float = 0.3
    window_size: int = 10
    beta: int = 2000
    prune_every: int = PRUNE_EVERY
    densify_grad: float = DENSIFY_GRAD
    downsample: int = DOWNSAMPLE
    first_downsample: int = FIRST_FRAME_DOWNSAMPLE

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        for name in ("lr_means", "lr_rotation", "lr_scale", "lr_opacity", "lr_color", "lr_exposure"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class MapFrame:
    """Everything the loss needs about one keyframe; ``exposure`` is updated in place."""

    kf: int
    pose: Pose
    image: np.ndarray
    depth: np.ndarray | None
    depth_valid: np.ndarray | None = None
    exposure: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    def __post_init__(self):
        if self.depth is not None and self.depth_valid is None:
            self.depth_valid = np.isfinite(self.depth) & (self.depth > 0)


# --- covisibility window ----------------------------------------------------

def visible_ids(gmap: GaussianMap, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Ids of Gaussians composited while the transmittance in front of them exceeds 0.5."""
    if len(gmap) == 0:
        return np.zeros(0, dtype=np.int64)
    return gmap.ids[render(gmap, pose, K).visible]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = len(np.union1d(a, b))
    return len(np.intersect1d(a, b)) / union if union else 0.0


def overlap_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    m = min(len(a), len(b))
    return len(np.intersect1d(a, b)) / m if m else 0.0


@dataclass
class KeyframeWindow:
    capacity: int = 10
    kfs: list[int] = field(default_factory=list)
    visibility: dict[int, np.ndarray] = field(default_factory=dict)
    last: int | None = None

    def __len__(self) -> int:
        return len(self.kfs)

    @property
    def full(self) -> bool:
        return len(self.kfs) >= self.capacity


def update_keyframe_window(window: KeyframeWindow, kf: int, visible: np.ndarray, translation: float,
                           median_depth: float, cfg: MappingConfig) -> tuple[bool, list[int]]:
    """Admit ``kf`` on low covisibility or large motion, then evict weakly overlapping members.

    ``visible`` are the Gaussian ids seen from ``kf``; ``translation`` is the
    camera distance to the previously admitted keyframe.
    """
    visible = np.asarray(visible, dtype=np.int64)
    if window.last is not None and window.last in window.visibility:
        cov = iou(visible, window.visibility[window.last])
        admit = cov < cfg.kf_cov or translation > cfg.kf_m * median_depth
    else:
        admit = True
    if not admit:
        return False, []
    evicted = [j for j in window.kfs
               if overlap_coefficient(visible, window.visibility.get(j, np.zeros(0, np.int64))) < cfg.kf_c]
    window.kfs = [j for j in window.kfs if j not in evicted]
    window.kfs.append(kf)
    while len(window.kfs) > window.capacity:
        evicted.append(window.kfs.pop(0))
    for j in evicted:
        window.visibility.pop(j, None)
    window.visibility[kf] = visible
    window.last = kf
    return True, evicted


# --- loss -----------------------------------------------------------------

def _sign(x):
    return np.sign(x)  # sign(0) = 0


def scale_regularizer(gmap: GaussianMap, lambda_reg: float) -> tuple[float, np.ndarray]:
    """(lambda_reg/|G|) sum |s - mean(s)|_1 and its gradient w.r.t. the log-scales."""
    n = len(gmap)
    if n == 0 or lambda_reg == 0:
        return 0.0, np.zeros((n, 3))
    s = gmap.scales
    dev = s - s.mean(axis=1, keepdims=True)
    value = lambda_reg / n * float(np.abs(dev).sum())
    sg = _sign(dev)
    ds = sg - sg.mean(axis=1, keepdims=True)
    return value, lambda_reg / n * ds * s


def frame_loss(out, frame: MapFrame, lam: float):
    """Photometric + geometric L1 terms of one frame and the adjoints w.r.t. the rendered images."""
    H, W = frame.image.shape[:2]
    N = H * W
    diff = out.color - frame.image
    photo = lam / N * float(np.abs(diff).sum())
    dC = lam / N * _sign(diff)
    dD = np.zeros((H, W))
    geo = 0.0
    if lam < 1.0:
        if frame.depth is None:
            raise MissingProxyDepth(frame.kf)
        mask = frame.depth_valid & (out.alpha >= VISIBLE_ALPHA)
        dd = np.where(mask, out.depth - np.where(mask, frame.depth, 0.0), 0.0)
        geo = (1.0 - lam) / N * float(np.abs(dd).sum())
        dD = (1.0 - lam) / N * _sign(dd)
    return photo, geo, dC, dD


def compute_loss(gmap: GaussianMap, frames, K: Intrinsics, cfg: MappingConfig, outputs=None):
    """Scalar loss, per-frame (render, dL/dC, dL/dD) and the regularizer gradient on log-scales."""
    total = 0.0
    per_frame = []
    for k, fr in enumerate(frames):
        out = outputs[k] if outputs is not None else render(gmap, fr.pose, K, fr.exposure)
        photo, geo, dC, dD = frame_loss(out, fr, cfg.lam)
        total += photo + geo
        per_frame.append((out, dC, dD))
    reg, dreg = scale_regularizer(gmap, cfg.lambda_reg)
    return total + reg, per_frame, dreg


# --- optimizer --------------------------------------------------------------

class Adam:
    """Adam with per-row step counters stored in ``gmap.state`` so moments follow inserts and prunes."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-15

    def __init__(self, gmap: GaussianMap, cfg: MappingConfig, extent: float = 1.0):
        self.gmap = gmap
        self.lr = {"means": cfg.lr_means * extent, "rotations": cfg.lr_rotation, "log_scales": cfg.lr_scale,
                   "logit_opacity": cfg.lr_opacity, "colors": cfg.lr_color}
        for name, width in (("means", 3), ("rotations", 3), ("log_scales", 3), ("logit_opacity", 0),
                            ("colors", 3)):
            for mom in ("m", "v"):
                key = f"adam_{mom}_{name}"
                if key not in gmap.state:
                    gmap.state[key] = np.zeros((len(gmap), width) if width else len(gmap))
        if "adam_t" not in gmap.state:
            gmap.state["adam_t"] = np.zeros(len(gmap))

    def _update(self, name, grad, rows):
        st = self.gmap.state
        m, v = st[f"adam_m_{name}"], st[f"adam_v_{name}"]
        m[rows] = self.BETA1 * m[rows] + (1 - self.BETA1) * grad[rows]
        v[rows] = self.BETA2 * v[rows] + (1 - self.BETA2) * grad[rows] ** 2
        t = st["adam_t"][rows]
        shape = (-1,) + (1,) * (grad.ndim - 1)
        mh = m[rows] / (1 - self.BETA1 ** t).reshape(shape)
        vh = v[rows] / (1 - self.BETA2 ** t).reshape(shape)
        return -self.lr[name] * mh / (np.sqrt(vh) + self.EPS)

    def step(self, grads: GradientBuffer, frozen=()):
        g = self.gmap
        rows = np.flatnonzero(np.any(grads.means != 0, axis=1) | np.any(grads.colors != 0, axis=1)
                              | (grads.logit_opacity != 0) | np.any(grads.log_scales != 0, axis=1))
        if len(rows) == 0:
            return
        g.state["adam_t"][rows] += 1
        if "means" not in frozen:
            g.means[rows] += self._update("means", grads.means, rows)
        if "rotations" not in frozen:
            dq = rotvec_to_quat(self._update("rotations", grads.rotations, rows))
            g.quats[rows] = quat_multiply(g.quats[rows], dq)
            g.normalize_quats()
        if "log_scales" not in frozen:
            g.log_scales[rows] += self._update("log_scales", grads.log_scales, rows)
        if "logit_opacity" not in frozen:
            g.logit_opacity[rows] += self._update("logit_opacity", grads.logit_opacity, rows)
        if "colors" not in frozen:
            g.colors[rows] += self._update("colors", grads.colors, rows)


class ExposureAdam:
    def __init__(self, lr: float):
        self.lr = lr
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t: dict[int, int] = {}

    def step(self, kf: int, exposure: np.ndarray, grad: np.ndarray):
        b1, b2 = Adam.BETA1, Adam.BETA2
        m = self.m.get(kf, np.zeros(2))
        v = self.v.get(kf, np.zeros(2))
        t = self.t.get(kf, 0) + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad ** 2
        self.m[kf], self.v[kf], self.t[kf] = m, v, t
        exposure -= self.lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + Adam.EPS)


@dataclass
class MapperState:
    """Counters and optimizer state that persist across mapping calls."""

    iteration: int = 0
    exposure_opt: ExposureAdam | None = None
    densified: int = 0
    pruned: int = 0


def scene_extent(poses, depths=()) -> float:
    centers = np.array([p.t for p in poses]) if poses else np.zeros((1, 3))
    radius = 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) if len(centers) else 0.0
    med = [float(np.median(d[np.isfinite(d) & (d > 0)])) for d in depths if np.any(np.isfinite(d) & (d > 0))]
    return max(radius, float(np.median(med)) if med else 0.0, 1e-3)


def _iterate(gmap, frames, K, cfg, opt, state, freeze_exposure=False, frozen=()):
    outputs = [render(gmap, fr.pose, K, fr.exposure) for fr in frames]
    loss, per_frame, dreg = compute_loss(gmap, frames, K, cfg, outputs)
    grads = GradientBuffer.zeros(len(gmap))
    H, W = K.height, K.width
    for fr, (out, dC, dD) in zip(frames, per_frame):
        gb = render_gradients(gmap, fr.pose, K, dC, dD, fr.exposure, output=out)
        grads += gb
        seen = out._ctx.splats.index
        ndc = np.hypot(gb.mean2d[seen, 0] * W / 2, gb.mean2d[seen, 1] * H / 2)
        gmap.grad_accum[seen] += ndc
        gmap.grad_count[seen] += 1
        if not freeze_exposure:
            state.exposure_opt.step(fr.kf, fr.exposure, gb.exposure)
    grads.log_scales += dreg
    opt.step(grads, frozen)
    return loss


def optimize_map(gmap: GaussianMap, frames, K: Intrinsics, cfg: MappingConfig, iterations: int | None = None,
                 state: MapperState | None = None, window: KeyframeWindow | None = None, extent: float = 1.0,
                 densify: bool = True, freeze_exposure: bool = False, frozen=()) -> list[float]:
    """Batched first-order optimization of all Gaussians over ``frames``; returns the loss trace."""
    iterations = cfg.map_iters if iterations is None else iterations
    state = state or MapperState()
    if state.exposure_opt is None:
        state.exposure_opt = ExposureAdam(cfg.lr_exposure)
    trace = []
    if iterations <= 0 or not frames or len(gmap) == 0:
        return trace
    opt = Adam(gmap, cfg, extent)
    for _ in range(iterations):
        trace.append(_iterate(gmap, frames, K, cfg, opt, state, freeze_exposure, frozen))
        state.iteration += 1
        if densify and state.iteration % cfg.prune_every == 0:
            ids = [fr.kf for fr in frames]
            poses = {fr.kf: fr.pose for fr in frames}
            full = window.full if window is not None else False
            vis = {fr.kf: render(gmap, fr.pose, K).visible for fr in frames} if full else None
            added, removed = densify_and_prune(gmap, ids, state.iteration, K=K, poses=poses, visibility=vis,
                                               window_full=full, scene_extent=extent,
                                               grad_threshold=cfg.densify_grad, prune_every=cfg.prune_every)
            state.densified += added
            state.pruned += removed
            opt = Adam(gmap, cfg, extent)
    return trace


def final_refine(gmap: GaussianMap, frames, K: Intrinsics, cfg: MappingConfig, beta: int | None = None,
                 rng: np.random.Generator | None = None, state: MapperState | None = None,
                 extent: float = 1.0) -> list[float]:
    """``beta`` iterations on one uniformly drawn keyframe each; no densification or pruning."""
    beta = cfg.beta if beta is None else beta
    rng = rng or np.random.default_rng(0)
    state = state or MapperState()
    if state.exposure_opt is None:
        state.exposure_opt = ExposureAdam(cfg.lr_exposure)
    trace = []
    if beta <= 0 or not frames or len(gmap) == 0:
        return trace
    opt = Adam(gmap, cfg, extent)
    for _ in range(beta):
        fr = frames[int(rng.integers(len(frames)))]
        trace.append(_iterate(gmap, [fr], K, cfg, opt, state))
    return trace


def refresh_visibility(window: KeyframeWindow, gmap: GaussianMap, poses: dict, K: Intrinsics) -> None:
    """Recompute the visible-id sets of all window members (ids change under densification)."""
    for kf in window.kfs:
        if kf in poses:
            window.visibility[kf] = visible_ids(gmap, poses[kf], K)
