"""Shared synthetic fixtures for the tracking tests and the acceptance suite."""
import time

import numpy as np

from dgslam.frontend_sim import generate_world, room_spec
from dgslam.geometry import Intrinsics, retract, so3_log
from dgslam.tracking import FactorGraph, Keyframe, dba_step
from dgslam.tracking.ba import _valid_counts


def exact_world(width=64, height=48, n_frames=40, mono=(1.0, 0.0, 0.0), seed=0):
    """Room world with zero flow noise."""
    return generate_world(room_spec(width, height, n_frames=n_frames, flow_sigma=0.0, mono=mono, seed=seed))


def perturb(pose, rng, rot=0.05, trans=0.05):
    d = rng.normal(size=6)
    d[:3] *= rot / np.linalg.norm(d[:3])
    d[3:] *= trans / np.linalg.norm(d[3:])
    return retract(pose, d)


def gt_graph(world, n=8, neighbors=3, rng=None, frames=None):
    """Graph over ``frames`` with GT disparities; poses after the first are perturbed when ``rng`` is given."""
    frames = list(range(n)) if frames is None else list(frames)
    g = FactorGraph(world.K)
    for k, f in enumerate(frames):
        pose = world.gt_pose(f)
        if rng is not None and k > 0:
            pose = perturb(pose, rng)
        g.add_keyframe(Keyframe(k, f, pose, 1.0 / world.gt_depth(f), world.mono_depth(f), world.image(f)))
    for k in range(len(frames)):
        for j in range(max(0, k - neighbors), min(len(frames), k + neighbors + 1)):
            if j != k:
                g.add_flow_edge(world, k, j)
    return g


def gauge_errors(graph, world):
    """(rotation error, translation error, disparity error) after fixing the first pose and the scale."""
    est = np.array([kf.pose.t for kf in graph.keyframes])
    gt = np.array([world.gt_pose(kf.frame).t for kf in graph.keyframes])
    de, dg = est - est[0], gt - gt[0]
    s = float(np.sum(de * dg) / np.sum(de * de))
    rot = max(np.linalg.norm(so3_log(kf.pose.R.T @ world.gt_pose(kf.frame).R)) for kf in graph.keyframes)
    trans = float(np.abs(s * de - dg).max())
    seen = _valid_counts(graph, graph.edges, range(len(graph)))
    disp = 0.0
    for k, kf in enumerate(graph.keyframes):
        m = seen[k].reshape(kf.disparity.shape) > 0
        disp = max(disp, float(np.abs(kf.disparity[m] / s - 1.0 / world.gt_depth(kf.frame)[m]).max()))
    return rot, trans, disp


def dba_convergence(seed=0, iters=10, tol=1e-6):
    """Run DBA from perturbed poses; returns (iterations to converge, errors, seconds)."""
    world = exact_world()
    g = gt_graph(world, rng=np.random.default_rng(seed))
    t0 = time.perf_counter()
    used = iters
    for it in range(iters):
        dba_step(g, range(len(g)))
        rot, trans, _ = gauge_errors(g, world)
        if max(rot, trans) < tol:
            used = it + 1
            break
    return used, gauge_errors(g, world), time.perf_counter() - t0


def consistency_scene(seed=0, n=4, size=16, arc=0.005):
    """Small frames of a textured box viewed from nearby poses, GT depths."""
    rng = np.random.default_rng(seed)
    K = Intrinsics(14.0, 14.0, (size - 1) / 2, (size - 1) / 2, size, size)
    spec = room_spec(size, size, n_frames=n, arc=arc, flow_sigma=0.0, mono=(1.0, 0.0, 0.0), seed=seed)
    spec["camera"].update(fx=K.fx, fy=K.fy, cx=K.cx, cy=K.cy)
    world = generate_world(spec)
    g = FactorGraph(world.K)
    for k in range(n):
        D = world.gt_depth(k) * (1.0 + 0.004 * rng.normal(size=(size, size)))
        g.add_keyframe(Keyframe(k, k, world.gt_pose(k), 1.0 / D, world.mono_depth(k), world.image(k)))
    return world, g


def make_tum_dir(root, world, n, t0=100.0, dt=0.1):
    """Write ``n`` frames of ``world`` as a TUM-style RGB-D directory."""
    from pathlib import Path

    from PIL import Image

    from dgslam.frontend_sim import write_tum_trajectory

    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    rgb_rows, depth_rows = [], []
    for k in range(n):
        ts = t0 + k * dt
        img = (np.clip(world.image(k), 0, 1) * 255).round().astype(np.uint8)
        D = world.gt_depth(k)
        raw = np.where(np.isfinite(D), np.round(D * 5000), 0).astype(np.uint16)
        Image.fromarray(img).save(root / f"rgb/{ts:.6f}.png")
        Image.fromarray(raw).save(root / f"depth/{ts + 0.004:.6f}.png")
        rgb_rows.append(f"{ts:.6f} rgb/{ts:.6f}.png")
        depth_rows.append(f"{ts + 0.004:.6f} depth/{ts + 0.004:.6f}.png")
    (root / "rgb.txt").write_text("# color images\n" + "\n".join(rgb_rows) + "\n")
    (root / "depth.txt").write_text("# depth maps\n" + "\n".join(depth_rows) + "\n")
    K = world.K
    (root / "intrinsics.txt").write_text(f"{K.fx} {K.fy} {K.cx} {K.cy}\n")
    write_tum_trajectory(root / "groundtruth.txt", [t0 + k * dt for k in range(n)],
                         [world.gt_pose(k) for k in range(n)])
    return root
