"""Proxy depth: multi-view depth where consistent, affinely scaled mono depth elsewhere."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit
from .tracking.ba import fit_scale_shift

INVALID, MULTIVIEW, MONO = 0, 1, 2
MIN_FIT_PIXELS = 100


@dataclass
class ProxyDepth:
    depth: np.ndarray
    source: np.ndarray
    scale: float
    shift: float

    @property
    def valid(self) -> np.ndarray:
        return self.source != INVALID

    @property
    def n_mono(self) -> int:
        return int(np.sum(self.source == MONO))


def fit_depth_scale_shift(mv_depth, mask, mono, previous=None, fallback=None,
                          min_pixels: int = MIN_FIT_PIXELS) -> tuple[float, float]:
    """Depth-space (theta, gamma); falls back to ``previous`` then ``fallback`` when the mask is too sparse."""
    mask = np.asarray(mask, dtype=bool) & np.isfinite(mv_depth) & np.isfinite(mono)
    if mask.sum() >= min_pixels:
        try:
            return fit_scale_shift(mv_depth, mono, mask, space="depth")
        except DegenerateFit:
            pass
    for alt in (previous, fallback):
        if alt is not None:
            return float(alt[0]), float(alt[1])
    raise DegenerateFit(f"only {int(mask.sum())} consistent pixels and no fallback fit")


def fuse_proxy_depth(mv_depth, valid, mono, scale: float, shift: float, use_mono: bool = True) -> ProxyDepth:
    """Piecewise fusion: ``mv_depth`` on valid pixels, ``scale * mono + shift`` elsewhere."""
    mv_depth = np.asarray(mv_depth, dtype=float)
    valid = np.asarray(valid, dtype=bool) & np.isfinite(mv_depth) & (mv_depth > 0)
    mono_d = scale * np.asarray(mono, dtype=float) + shift
    depth = np.where(valid, mv_depth, mono_d if use_mono else np.nan)
    source = np.where(valid, MULTIVIEW, MONO)
    bad = ~valid & (~np.isfinite(depth) | (depth <= 0))
    source = np.where(bad, INVALID, source).astype(np.int8)
    depth = np.where(bad, 0.0, depth)
    return ProxyDepth(depth, source, float(scale), float(shift))


def keyframe_proxy(kf, fallback=None, use_mono: bool = True, use_filter: bool = True) -> ProxyDepth:
    """Proxy depth of a tracked keyframe; updates its cached depth-space fit."""
    mv = kf.depth
    valid = kf.low_error & kf.valid if use_filter else kf.valid
    theta, gamma = fit_depth_scale_shift(mv, kf.low_error & kf.valid, kf.mono_depth, kf.depth_fit, fallback)
    kf.depth_fit = (theta, gamma)
    return fuse_proxy_depth(mv, valid, kf.mono_depth, theta, gamma, use_mono=use_mono)
