"""Synthetic stand-in for the learned front-ends.

A world of textured planes and spheres is ray cast analytically from a
ground-truth trajectory. Flow between two frames is the exact geometric
correspondence plus optional Gaussian noise and an optional per-pair rigid
bias (odometry drift); monocular depth is the true depth pushed through an
inverse affine map plus multiplicative noise, so the correct depth-space
recovery is (scale, shift) = (a_m, b_m).
"""
from __future__ import annotations

import configparser
from pathlib import Path
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, InvalidSpec, IoError
from .geometry import Intrinsics, Pose, se3_exp

OCCLUSION_TOL = 1e-6
MIN_COVERAGE = 0.3
FLOW_CACHE = 64


# --- textures -------------------------------------------------------------

def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


@dataclass
class ValueNoise:
    """Deterministic 3D value noise; two octaves, values in [0, 1]."""

    seed: int
    frequency: float = 1.0
    table: np.ndarray = field(init=False, repr=False)
    perm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.table = rng.uniform(0.0, 1.0, size=256)
        self.perm = rng.permutation(256)

    def _lattice(self, ix, iy, iz):
        p = self.perm
        return self.table[p[(p[(p[ix & 255] + iy) & 255] + iz) & 255]]

    def _octave(self, pts):
        f = np.floor(pts)
        i = f.astype(np.int64)
        t = _smooth(pts - f)
        out = 0.0
        for dx in (0, 1):
            wx = t[..., 0] if dx else 1 - t[..., 0]
            for dy in (0, 1):
                wy = t[..., 1] if dy else 1 - t[..., 1]
                for dz in (0, 1):
                    wz = t[..., 2] if dz else 1 - t[..., 2]
                    out = out + wx * wy * wz * self._lattice(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz)
        return out

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float) * self.frequency
        return (2.0 * self._octave(pts) + self._octave(2.0 * pts + 17.3)) / 3.0


@dataclass
class Texture:
    base: np.ndarray
    amplitude: float
    frequency: float
    seed: int

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.noises = [ValueNoise(self.seed * 3 + c, self.frequency) for c in range(3)]

    def __call__(self, pts):
        cols = [self.base[c] + self.amplitude * (self.noises[c](pts) - 0.5) for c in range(3)]
        return np.clip(np.stack(cols, axis=-1), 0.0, 1.0)


# --- primitives -----------------------------------------------------------

@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    texture: Texture

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origin) @ self.normal) / denom
        return np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        a = np.sum(dirs * dirs, axis=-1)
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)


# --- trajectories ---------------------------------------------------------

def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (camera +z forward, +y down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_rt(np.stack([x, y, z], axis=1), eye)


def circle_trajectory(n_frames: int, radius: float, height: float = 0.0, arc: float = 2 * np.pi,
                      look: str = "outward", target=(0.0, 0.0, 0.0), wobble: float = 0.0) -> list[Pose]:
    """Camera on a horizontal circle (y is up-negative). ``look`` is 'outward', 'inward' or 'tangent'."""
    poses = []
    for k in range(n_frames):
        a = arc * k / n_frames
        eye = np.array([radius * np.cos(a), height + wobble * np.sin(3 * a), radius * np.sin(a)])
        if look == "inward":
            tgt = np.asarray(target, dtype=float)
        elif look == "tangent":
            tgt = eye + np.array([-np.sin(a), 0.0, np.cos(a)])
        else:
            tgt = eye + np.array([np.cos(a), 0.0, np.sin(a)])
        poses.append(look_at(eye, tgt))
    return poses


def line_trajectory(n_frames: int, start, end, look_dir=(0.0, 0.0, 1.0)) -> list[Pose]:
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    out = []
    for k in range(n_frames):
        eye = start + (end - start) * (k / max(n_frames - 1, 1))
        out.append(look_at(eye, eye + np.asarray(look_dir, dtype=float)))
    return out


# --- world ----------------------------------------------------------------

@dataclass
class Noise:
    flow_sigma: float = 0.0
    mono_scale: float = 1.0
    mono_shift: float = 0.0
    mono_sigma: float = 0.0
    drift: float = 0.0


@dataclass
class FrontendObservation:
    image: np.ndarray
    gt_depth: np.ndarray
    mono_depth: np.ndarray
    flows: dict = field(default_factory=dict)


class FlowSource:
    """Flow, mean flow, mono depth and observations from ``_correspond`` and ground-truth depth.

    Subclasses provide ``K``, ``noise``, ``seed``, ``image``, ``gt_depth``,
    ``gt_pose`` and ``_correspond(i, j, noise, stride) -> (target, ok)``.
    """

    def _init_caches(self):
        self._flows = OrderedDict()
        self._mean_flows = {}

    def _rng(self, *key) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])

    def mono_depth(self, i: int, noise: Noise | None = None) -> np.ndarray:
        nz = noise or self.noise
        gt = self.gt_depth(i)
        rng = self._rng(1, i)
        gt_f = np.where(np.isfinite(gt), gt, 0.0)
        mono = (gt_f - nz.mono_shift) / nz.mono_scale
        if nz.mono_sigma > 0:
            mono = mono + rng.normal(size=gt.shape) * nz.mono_sigma * gt_f / nz.mono_scale
        return np.where(np.isfinite(gt), np.maximum(mono, 1e-3), np.nan)

    def flow(self, i: int, j: int, noise: Noise | None = None):
        """Predicted pixel positions in frame j of every pixel of frame i, and per-coordinate confidence."""
        nz = noise or self.noise
        key = ("flow", i, j, nz.flow_sigma, nz.drift)
        if key in self._flows:
            self._flows.move_to_end(key)
            return self._flows[key]
        target, ok = self._correspond(i, j, nz)
        conf_value = 1.0 / nz.flow_sigma ** 2 if nz.flow_sigma > 0 else 1.0
        conf = np.where(ok[..., None], conf_value, 0.0) * np.ones(2)
        target = np.where(ok[..., None], target, 0.0)
        self._flows[key] = (target, conf)
        if len(self._flows) > FLOW_CACHE:
            self._flows.popitem(last=False)
        return target, conf

    def mean_flow(self, i: int, j: int, stride: int = 4) -> float:
        """Mean flow magnitude on a strided pixel subset (inf with under 5% overlap)."""
        key = (i, j, stride)
        if key not in self._mean_flows:
            target, ok = self._correspond(i, j, self.noise, stride)
            if ok.sum() < 0.05 * ok.size:
                val = np.inf
            else:
                u, v = self.K.pixel_grid()
                u, v = u[::stride, ::stride], v[::stride, ::stride]
                val = float(np.hypot(target[..., 0] - u, target[..., 1] - v)[ok].mean())
            self._mean_flows[key] = val
        return self._mean_flows[key]

    def observe(self, i: int, targets=(), noise: Noise | None = None) -> FrontendObservation:
        nz = noise or self.noise
        flows = {j: self.flow(i, j, nz) for j in targets}
        return FrontendObservation(self.image(i).copy(), self.gt_depth(i).copy(), self.mono_depth(i, nz), flows)

    def timestamp(self, i: int) -> float:
        return float(i)



class SyntheticWorld(FlowSource):
    def __init__(self, primitives, trajectory: list[Pose], intrinsics: Intrinsics, seed: int = 0,
                 noise: Noise | None = None, validate: bool = True):
        if not primitives:
            raise InvalidSpec("world needs at least one primitive")
        if not trajectory:
            raise InvalidSpec("world needs at least one pose")
        self.primitives = list(primitives)
        self.trajectory = list(trajectory)
        self.K = intrinsics
        self.seed = int(seed)
        self.noise = noise or Noise()
        self._rays = intrinsics.rays()
        self._cache = {}
        self._init_caches()
        if validate:
            for k, pose in enumerate(self.trajectory):
                depth = self.cast(pose)[0]
                if np.mean(np.isfinite(depth)) < MIN_COVERAGE:
                    raise InvalidSpec(f"pose {k} sees less than {MIN_COVERAGE:.0%} of the scene")

    def __len__(self) -> int:
        return len(self.trajectory)

    # ray casting
    def raycast(self, origin, dirs):
        """Nearest hit distance along ``dirs`` (not necessarily unit) and primitive index."""
        best = np.full(dirs.shape[:-1], np.inf)
        which = np.full(dirs.shape[:-1], -1, dtype=np.int64)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(origin, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
        return best, which

    def cast(self, pose: Pose):
        """(z-depth, color, world points, primitive id) for every pixel; depth is inf on misses."""
        dirs = self._rays @ pose.R.T
        t, which = self.raycast(pose.t, dirs)
        pts = pose.t + dirs * np.where(np.isfinite(t), t, 0.0)[..., None]
        color = np.zeros(dirs.shape)
        for k, prim in enumerate(self.primitives):
            m = which == k
            if m.any():
                color[m] = prim.texture(pts[m])
        # rays have unit z in the camera frame, so the hit distance is the z-depth
        return t, color, pts, which

    def frame(self, i: int):
        if ("frame", i) not in self._cache:
            depth, color, pts, _ = self.cast(self.trajectory[i])
            self._cache[("frame", i)] = (depth, color, pts)
        return self._cache[("frame", i)]

    def gt_depth(self, i: int) -> np.ndarray:
        return self.frame(i)[0]

    def image(self, i: int) -> np.ndarray:
        return self.frame(i)[1]

    def gt_pose(self, i: int) -> Pose:
        return self.trajectory[i]

    def _correspond(self, i: int, j: int, nz: Noise, stride: int = 1):
        depth, _, pts = self.frame(i)
        depth, pts = depth[::stride, ::stride], pts[::stride, ::stride]
        H, W = self.K.height, self.K.width
        target_pose = self.trajectory[j]
        if nz.drift > 0 and i != j:
            xi = self._rng(2, i, j).normal(size=6) * nz.drift
            dR, dt = se3_exp(xi)
            target_pose = Pose.from_rt(dR @ target_pose.R, dR @ target_pose.t + dt)
        Rj, tj = target_pose.R, target_pose.t
        hit = np.isfinite(depth)
        p = np.where(hit[..., None], pts, 0.0)
        xc = (p - tj) @ Rj
        z = xc[..., 2]
        zs = np.where(z > 1e-9, z, 1.0)
        u = self.K.fx * xc[..., 0] / zs + self.K.cx
        v = self.K.fy * xc[..., 1] / zs + self.K.cy
        ok = hit & (z > 0.01) & (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)
        # occlusion: the true camera j must see this very point first
        tt = self.trajectory[j].t
        d = p - tt
        dist = np.linalg.norm(d, axis=-1)
        thit, _ = self.raycast(tt, d / np.maximum(dist, 1e-12)[..., None])
        ok &= thit >= dist - OCCLUSION_TOL * np.maximum(dist, 1.0)
        target = np.stack([u, v], axis=-1)
        if np.array_equal(target_pose.entries(), self.trajectory[i].entries()):
            # same camera: exact identity flow without round-off
            gu, gv = self.K.pixel_grid()
            target = np.stack([gu[::stride, ::stride], gv[::stride, ::stride]], axis=-1).astype(float)
        if nz.flow_sigma > 0:
            target = target + self._rng(3, i, j, stride).normal(size=target.shape) * nz.flow_sigma
        return target, ok


def observe(world: SyntheticWorld, i: int, targets=(), noise: Noise | None = None) -> FrontendObservation:
    return world.observe(i, targets, noise)


# --- spec files -----------------------------------------------------------

def _vec(text, n=3):
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != n:
        raise InvalidSpec(f"expected {n} numbers, got '{text}'")
    return np.array(vals)


def generate_world(spec: dict | str, seed: int | None = None) -> SyntheticWorld:
    """Build a world from a spec dict (or INI path / text).

    Sections: [camera] width height fx fy cx cy; [trajectory] kind n_frames ...;
    [noise] flow_sigma mono_scale mono_shift mono_sigma drift; any number of
    [plane.*] (point, normal, color, amplitude, frequency) and
    [sphere.*] (center, radius, color, amplitude, frequency).
    """
    if isinstance(spec, str):
        cp = configparser.ConfigParser()
        if "\n" in spec or "[" in spec:
            cp.read_string(spec)
        else:
            if not cp.read(spec):
                raise InvalidSpec(f"cannot read world spec {spec}")
        spec = {s: dict(cp[s]) for s in cp.sections()}
    try:
        world_sec = spec.get("world", {})
        seed = int(world_sec.get("seed", 0)) if seed is None else int(seed)
        cam = spec["camera"]
        W, H = int(cam["width"]), int(cam["height"])
        K = Intrinsics(float(cam.get("fx", W * 0.8)), float(cam.get("fy", cam.get("fx", W * 0.8))),
                       float(cam.get("cx", (W - 1) / 2)), float(cam.get("cy", (H - 1) / 2)), W, H)
        prims = []
        for name in sorted(spec):
            sec = spec[name]
            tex = Texture(_vec(sec.get("color", "0.5 0.5 0.5")), float(sec.get("amplitude", 0.5)),
                          float(sec.get("frequency", 1.0)), seed * 1000 + len(prims))
            if name.startswith("plane"):
                prims.append(Plane(_vec(sec["point"]), _vec(sec["normal"]), tex))
            elif name.startswith("sphere"):
                r = float(sec["radius"])
                if r <= 0:
                    raise InvalidSpec("sphere radius must be positive")
                prims.append(Sphere(_vec(sec["center"]), r, tex))
        tr = spec["trajectory"]
        kind = tr.get("kind", "static")
        n = int(tr.get("n_frames", 1))
        if n < 1:
            raise InvalidSpec("n_frames must be >= 1")
        if kind == "static":
            eye = _vec(tr.get("eye", "0 0 0"))
            traj = [look_at(eye, eye + _vec(tr.get("direction", "0 0 1")))] * n
        elif kind == "circle":
            traj = circle_trajectory(n, float(tr.get("radius", 1.0)), float(tr.get("height", 0.0)),
                                     float(tr.get("arc", 2 * np.pi)), tr.get("look", "outward"),
                                     _vec(tr.get("target", "0 0 0")), float(tr.get("wobble", 0.0)))
        elif kind == "line":
            traj = line_trajectory(n, _vec(tr["start"]), _vec(tr["end"]), _vec(tr.get("direction", "0 0 1")))
        else:
            raise InvalidSpec(f"unknown trajectory kind '{kind}'")
        nz = spec.get("noise", {})
        noise = Noise(float(nz.get("flow_sigma", 0.0)), float(nz.get("mono_scale", 1.0)),
                      float(nz.get("mono_shift", 0.0)), float(nz.get("mono_sigma", 0.0)),
                      float(nz.get("drift", 0.0)))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, InvalidSpec):
            raise
        raise InvalidSpec(f"bad world spec: {exc}") from exc
    return SyntheticWorld(prims, traj, K, seed, noise)


def room_spec(width: int = 128, height: int = 96, n_frames: int = 60, arc: float = 2 * np.pi,
              flow_sigma: float = 0.25, mono=(1.5, 0.2, 0.01), drift: float = 0.0, seed: int = 0,
              radius: float = 0.6, frequency: float = 0.8) -> dict:
    """A closed room with a few spheres, camera on an outward-looking circle (returns to the start)."""
    fx = width * 0.78
    spec = {
        "world": {"seed": seed},
        "camera": {"width": width, "height": height, "fx": fx, "fy": fx,
                   "cx": (width - 1) / 2, "cy": (height - 1) / 2},
        "trajectory": {"kind": "circle", "n_frames": n_frames, "radius": radius, "arc": arc,
                       "look": "outward", "height": 0.0, "wobble": 0.05},
        "noise": {"flow_sigma": flow_sigma, "mono_scale": mono[0], "mono_shift": mono[1],
                  "mono_sigma": mono[2], "drift": drift},
    }
    walls = [("0 0 2.5", "0 0 -1", "0.8 0.4 0.3"), ("0 0 -2.5", "0 0 1", "0.3 0.6 0.8"),
             ("2.5 0 0", "-1 0 0", "0.4 0.7 0.3"), ("-2.5 0 0", "1 0 0", "0.7 0.7 0.3"),
             ("0 1.0 0", "0 -1 0", "0.5 0.5 0.5"), ("0 -1.0 0", "0 1 0", "0.9 0.9 0.8")]
    for k, (p, n, c) in enumerate(walls):
        spec[f"plane.{k}"] = {"point": p, "normal": n, "color": c, "amplitude": 0.5, "frequency": frequency}
    colors = ["0.9 0.2 0.2", "0.2 0.3 0.9", "0.3 0.8 0.4", "0.8 0.8 0.2"]
    for k, (ang, h) in enumerate([(0.5, 0.3), (2.0, -0.2), (3.6, 0.1), (5.0, -0.3)]):
        c = f"{1.7 * np.cos(ang):.3f} {h} {1.7 * np.sin(ang):.3f}"
        spec[f"sphere.{k}"] = {"center": c, "radius": 0.35, "color": colors[k], "amplitude": 0.4,
                               "frequency": frequency * 2}
    return spec


def write_spec(spec: dict, path) -> None:
    cp = configparser.ConfigParser()
    for sec, vals in spec.items():
        cp[sec] = {k: str(v) for k, v in vals.items()}
    with open(path, "w") as fh:
        cp.write(fh)


# --- TUM RGB-D style directories --------------------------------------------

TUM_DEPTH_SCALE = 5000.0
TUM_INTRINSICS = (517.3, 516.5, 318.6, 255.3)  # freiburg1 at 640x480
MAX_TIME_DIFF = 0.02
DEPTH_OCCLUSION = 0.05


def read_rows(path) -> list[list[str]]:
    """Whitespace separated rows of a text file, skipping blanks and '#' comments."""
    try:
        with open(path) as fh:
            return [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def associate(ts_a, ts_b, max_dt: float = MAX_TIME_DIFF) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp matching (index pairs sorted by the first list)."""
    ts_a, ts_b = np.asarray(ts_a, dtype=float), np.asarray(ts_b, dtype=float)
    if len(ts_a) == 0 or len(ts_b) == 0:
        return []
    diff = np.abs(ts_a[:, None] - ts_b[None, :])
    cand = sorted((diff[i, j], i, j) for i, j in zip(*np.nonzero(diff < max_dt)))
    used_a, used_b, out = set(), set(), []
    for _, i, j in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.append((int(i), int(j)))
    return sorted(out)


def read_tum_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    """(timestamps, poses) from "timestamp tx ty tz qx qy qz qw" rows."""
    rows = read_rows(path)
    try:
        vals = np.array([[float(x) for x in r[:8]] for r in rows]).reshape(-1, 8)
    except ValueError as exc:
        raise InvalidInput(f"malformed trajectory file {path}") from exc
    poses = [Pose(np.array([r[7], r[4], r[5], r[6]]), r[1:4]) for r in vals]
    return vals[:, 0], poses


def write_tum_trajectory(path, timestamps, poses) -> None:
    try:
        with open(path, "w") as fh:
            for ts, p in zip(timestamps, poses):
                w, x, y, z = p.q
                fh.write(f"{ts:.6f} {p.t[0]:.9f} {p.t[1]:.9f} {p.t[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def interpolate_poses(ts, poses, query) -> list[Pose | None]:
    """Linear/slerp interpolation of a trajectory; None outside its time span."""
    from scipy.spatial.transform import Rotation, Slerp

    ts = np.asarray(ts, dtype=float)
    order = np.argsort(ts)
    ts = ts[order]
    poses = [poses[k] for k in order]
    rots = Rotation.from_quat([[p.q[1], p.q[2], p.q[3], p.q[0]] for p in poses])
    trans = np.array([p.t for p in poses])
    slerp = Slerp(ts, rots) if len(ts) > 1 else None
    out = []
    for q in np.asarray(query, dtype=float):
        if len(ts) == 1:
            out.append(poses[0] if abs(q - ts[0]) < MAX_TIME_DIFF else None)
            continue
        if q < ts[0] - MAX_TIME_DIFF or q > ts[-1] + MAX_TIME_DIFF:
            out.append(None)
            continue
        qc = float(np.clip(q, ts[0], ts[-1]))
        R = slerp([qc]).as_matrix()[0]
        t = np.array([np.interp(qc, ts, trans[:, k]) for k in range(3)])
        out.append(Pose.from_rt(R, t))
    return out


class TumDataset(FlowSource):
    """RGB-D directory (rgb/, depth/, lists, groundtruth.txt) served through the front-end interface.

    Depth stands in for the learned networks: flow is the depth-and-pose
    correspondence plus noise, with z-buffer occlusion against the target
    depth; mono depth is the measured depth through the inverse affine map.
    """

    def __init__(self, root, scale: float = 1.0, max_frames: int = 0, noise: Noise | None = None,
                 seed: int = 0, intrinsics: Intrinsics | None = None, depth_scale: float = TUM_DEPTH_SCALE):
        self.root = Path(root)
        if not self.root.is_dir():
            raise InvalidInput(f"dataset directory {root} does not exist")
        self.scale = float(scale)
        self.depth_scale = float(depth_scale)
        self.noise = noise or Noise()
        self.seed = int(seed)
        self.stamps, self.rgb_paths, self.depth_paths = self._frames()
        gt_file = self.root / "groundtruth.txt"
        if not gt_file.exists():
            raise InvalidInput("groundtruth.txt is required (flow is derived from depth and poses)")
        gts, gposes = read_tum_trajectory(gt_file)
        if len(gts) == 0:
            raise InvalidInput("empty groundtruth.txt")
        interp = interpolate_poses(gts, gposes, self.stamps)
        keep = [k for k, p in enumerate(interp) if p is not None]
        if max_frames > 0:
            keep = keep[:max_frames]
        self.stamps = [self.stamps[k] for k in keep]
        self.rgb_paths = [self.rgb_paths[k] for k in keep]
        self.depth_paths = [self.depth_paths[k] for k in keep]
        self.poses = [interp[k] for k in keep]
        self.K = self._intrinsics(intrinsics)
        self._cache = {}
        self._init_caches()

    def _frames(self):
        assoc = self.root / "associations.txt"
        if assoc.exists():
            rows = read_rows(assoc)
            if any(len(r) < 4 for r in rows):
                raise InvalidInput("associations.txt rows need: ts rgb_path ts depth_path")
            return [float(r[0]) for r in rows], [r[1] for r in rows], [r[3] for r in rows]
        rgb, dep = read_rows(self.root / "rgb.txt"), read_rows(self.root / "depth.txt")
        pairs = associate([float(r[0]) for r in rgb], [float(r[0]) for r in dep])
        return [float(rgb[i][0]) for i, _ in pairs], [rgb[i][1] for i, _ in pairs], [dep[j][1] for _, j in pairs]

    def _intrinsics(self, K: Intrinsics | None) -> Intrinsics:
        if not self.rgb_paths:
            raise InvalidInput("dataset has no associated frames")
        from PIL import Image

        with Image.open(self.root / self.rgb_paths[0]) as im:
            W0, H0 = im.size
        if K is None:
            f = self.root / "intrinsics.txt"
            fx, fy, cx, cy = (float(x) for x in read_rows(f)[0][:4]) if f.exists() else TUM_INTRINSICS
            K = Intrinsics(fx, fy, cx, cy, W0, H0)
        return K.scaled(self.scale) if self.scale != 1.0 else K

    def __len__(self) -> int:
        return len(self.stamps)

    def _load(self, i: int):
        if i not in self._cache:
            from PIL import Image

            size = (self.K.width, self.K.height)
            try:
                with Image.open(self.root / self.rgb_paths[i]) as im:
                    rgb = np.asarray(im.convert("RGB").resize(size, Image.BILINEAR), dtype=float) / 255.0
                with Image.open(self.root / self.depth_paths[i]) as im:
                    raw = np.asarray(im.resize(size, Image.NEAREST), dtype=float)
            except OSError as exc:
                raise IoError(f"cannot read frame {i}: {exc}") from exc
            depth = np.where(raw > 0, raw / self.depth_scale, np.nan)
            self._cache[i] = (rgb, depth)
        return self._cache[i]

    def image(self, i: int) -> np.ndarray:
        return self._load(i)[0]

    def gt_depth(self, i: int) -> np.ndarray:
        return self._load(i)[1]

    def gt_pose(self, i: int) -> Pose:
        return self.poses[i]

    def timestamp(self, i: int) -> float:
        return float(self.stamps[i])

    def _correspond(self, i: int, j: int, nz: Noise, stride: int = 1):
        D = self.gt_depth(i)[::stride, ::stride]
        rays = self.K.rays()[::stride, ::stride]
        H, W = self.K.height, self.K.width
        rel = self.poses[j].inverse() @ self.poses[i]
        hit = np.isfinite(D)
        X = rays * np.where(hit, D, 0.0)[..., None]
        xc = X @ rel.R.T + rel.t
        z = xc[..., 2]
        zs = np.where(z > 1e-9, z, 1.0)
        u = self.K.fx * xc[..., 0] / zs + self.K.cx
        v = self.K.fy * xc[..., 1] / zs + self.K.cy
        ok = hit & (z > 0.01) & (u >= -0.5) & (u < W - 0.5) & (v >= -0.5) & (v < H - 0.5)
        ui = np.clip(np.rint(u), 0, W - 1).astype(np.int64)
        vi = np.clip(np.rint(v), 0, H - 1).astype(np.int64)
        Dj = self.gt_depth(j)[vi, ui]
        ok &= np.isfinite(Dj) & (z <= Dj * (1.0 + DEPTH_OCCLUSION))
        target = np.stack([u, v], axis=-1)
        if i == j:
            # same camera: exact identity flow without round-off
            gu, gv = self.K.pixel_grid()
            target = np.stack([gu[::stride, ::stride], gv[::stride, ::stride]], axis=-1).astype(float)
        if nz.flow_sigma > 0:
            target = target + self._rng(3, i, j, stride).normal(size=target.shape) * nz.flow_sigma
        return target, ok
