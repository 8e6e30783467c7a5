import numpy as np
import pytest

from dgslam.errors import InvalidInput, InvalidSpec
from dgslam.frontend_sim import (Noise, TumDataset, associate, generate_world, observe, read_tum_trajectory,
                                 room_spec, write_spec, write_tum_trajectory)
from dgslam.geometry import Pose, so3_exp
from dgslam.proxy_depth import fit_depth_scale_shift
from dgslam.tracking import graph_residual

from scenes import exact_world, gt_graph, make_tum_dir


def base_spec(**prims):
    spec = {"camera": {"width": 33, "height": 25, "fx": 30, "fy": 30},
            "trajectory": {"kind": "static", "n_frames": 2}}
    spec.update(prims)
    return spec


def test_fronto_parallel_plane_depth():
    w = generate_world(base_spec(plane={"point": "0 0 2", "normal": "0 0 -1"}))
    assert np.allclose(w.gt_depth(0), 2.0, atol=1e-12)


def test_sphere_center_depth():
    spec = base_spec(**{"sphere.0": {"center": "0 0 3", "radius": 1.0},
                        "plane": {"point": "0 0 10", "normal": "0 0 -1"}})
    w = generate_world(spec)
    assert w.gt_depth(0)[12, 16] == pytest.approx(2.0, abs=1e-12)


def test_same_seed_bit_identical():
    a = generate_world(room_spec(32, 24, n_frames=4, seed=3))
    b = generate_world(room_spec(32, 24, n_frames=4, seed=3))
    for k in range(4):
        assert np.array_equal(a.image(k), b.image(k))
        assert np.array_equal(a.mono_depth(k), b.mono_depth(k), equal_nan=True)
    fa, fb = a.flow(0, 2), b.flow(0, 2)
    assert np.array_equal(fa[0], fb[0]) and np.array_equal(fa[1], fb[1])


def test_different_seed_differs():
    a = generate_world(room_spec(32, 24, n_frames=2, seed=0))
    b = generate_world(room_spec(32, 24, n_frames=2, seed=1))
    assert not np.array_equal(a.image(0), b.image(0))


def test_zero_flow_between_identical_poses():
    w = exact_world(32, 24, n_frames=3)
    target, conf = w.flow(1, 1)
    u, v = w.K.pixel_grid()
    ok = conf[..., 0] > 0
    assert ok.mean() == np.isfinite(w.gt_depth(1)).mean() == 1.0
    assert np.array_equal(target[..., 0], u) and np.array_equal(target[..., 1], v)
    assert np.all(conf == 1.0)


def test_exact_flow_zero_residual():
    w = exact_world(32, 24)
    assert graph_residual(gt_graph(w, n=4)) < 1e-18


def test_mono_fit_recovers_affine():
    w = generate_world(room_spec(32, 24, n_frames=2, flow_sigma=0.0, mono=(2.0, 0.0, 0.0)))
    gt = w.gt_depth(0)
    ok = np.isfinite(gt)
    theta, gamma = fit_depth_scale_shift(gt, ok, w.mono_depth(0))
    assert abs(theta - 2.0) < 1e-10 and abs(gamma) < 1e-10


def test_mono_distortion_formula():
    w = generate_world(room_spec(32, 24, n_frames=2, mono=(1.5, 0.2, 0.0)))
    gt = w.gt_depth(0)
    assert np.allclose(w.mono_depth(0), (gt - 0.2) / 1.5)


def test_flow_noise_and_confidence():
    w = generate_world(room_spec(64, 48, n_frames=40, flow_sigma=0.5))
    noisy, conf = w.flow(0, 1)
    exact, _ = w.flow(0, 1, Noise())
    ok = conf[..., 0] > 0
    err = (noisy - exact)[ok]
    assert np.std(err) == pytest.approx(0.5, rel=0.05)
    assert np.all(conf[ok] == 1.0 / 0.25)


def test_observe_bundle():
    w = exact_world(32, 24, n_frames=4)
    obs = observe(w, 0, targets=(1, 2))
    assert set(obs.flows) == {1, 2}
    assert obs.image.shape == (24, 32, 3) and obs.gt_depth.shape == (24, 32)


def segment_hits_sphere(a, b, center, r):
    """Does the open segment a->b pass through the sphere (closed-form closest point)?"""
    d = b - a
    L2 = d @ d
    t = np.clip((center - a) @ d / L2, 0.0, 1.0)
    closest = a + t * d
    return np.linalg.norm(closest - center) < r - 1e-6 and 1e-9 < t < 1 - 1e-9


def test_occluded_pixels_have_zero_confidence():
    spec = {"camera": {"width": 40, "height": 30, "fx": 30, "fy": 30},
            "trajectory": {"kind": "line", "n_frames": 2, "start": "0 0 0", "end": "0.8 0 0"},
            "plane": {"point": "0 0 4", "normal": "0 0 -1"},
            "sphere.0": {"center": "0.6 0 2", "radius": 0.3}}
    w = generate_world(spec)
    _, conf = w.flow(0, 1)
    _, _, pts = w.frame(0)
    cj = w.gt_pose(1).t
    H, W = 30, 40
    n_occ = 0
    for v in range(H):
        for u in range(W):
            occluded = segment_hits_sphere(cj, pts[v, u], np.array([0.6, 0, 2.0]), 0.3)
            if occluded:
                n_occ += 1
                assert conf[v, u, 0] == 0
    assert n_occ > 10


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        generate_world({"camera": {"width": 8, "height": 8}, "trajectory": {"kind": "static"}})
    with pytest.raises(InvalidSpec):
        generate_world(base_spec(**{"sphere.0": {"center": "0 0 3", "radius": -1}}))
    with pytest.raises(InvalidSpec):
        generate_world(base_spec(plane={"point": "0 0 2", "normal": "0 0 -1"}) | {"trajectory": {"kind": "spiral"}})
    with pytest.raises(InvalidSpec):
        # the plane is behind the camera: nothing visible
        generate_world(base_spec(plane={"point": "0 0 -2", "normal": "0 0 1"}))


def test_spec_file_round_trip(tmp_path):
    spec = room_spec(32, 24, n_frames=3, seed=2)
    write_spec(spec, tmp_path / "world.ini")
    a = generate_world(spec)
    b = generate_world(str(tmp_path / "world.ini"))
    assert np.allclose(a.image(1), b.image(1)) and np.allclose(a.gt_depth(2), b.gt_depth(2))


# --- TUM-style input ----------------------------------------------------------

def test_associate_nearest():
    assert associate([0.0, 1.0, 2.0], [1.005, 0.01, 5.0]) == [(0, 1), (1, 0)]


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    poses = [Pose.from_rt(so3_exp(rng.normal(size=3)), rng.normal(size=3)) for _ in range(5)]
    ts = np.arange(5) * 0.5 + 10
    write_tum_trajectory(tmp_path / "t.txt", ts, poses)
    rts, rposes = read_tum_trajectory(tmp_path / "t.txt")
    assert np.allclose(rts, ts)
    assert all(a.allclose(b, atol=1e-8) for a, b in zip(poses, rposes))


def test_tum_reader(tmp_path):
    w = exact_world(32, 24, n_frames=40)
    make_tum_dir(tmp_path, w, 5)
    ds = TumDataset(tmp_path)
    assert len(ds) == 5 and ds.K == w.K
    gt = w.gt_depth(2)
    ok = np.isfinite(gt)
    assert np.allclose(ds.gt_depth(2)[ok], gt[ok], atol=1e-4)
    assert np.abs(ds.image(3) - w.image(3)).max() <= 0.5 / 255 + 1e-9
    assert ds.gt_pose(4).allclose(w.gt_pose(4), atol=1e-8)
    assert ds.timestamp(1) == pytest.approx(100.1)


def test_tum_flow_matches_synthetic(tmp_path):
    w = exact_world(32, 24, n_frames=40)
    make_tum_dir(tmp_path, w, 5)
    ds = TumDataset(tmp_path)
    t_ds, c_ds = ds.flow(0, 1)
    t_w, c_w = w.flow(0, 1)
    both = (c_ds[..., 0] > 0) & (c_w[..., 0] > 0)
    assert both.sum() >= 0.95 * (c_w[..., 0] > 0).sum()
    # depth quantization at 1/5000 m only
    assert np.abs(t_ds - t_w)[both].max() < 0.01


def test_tum_max_frames_and_scale(tmp_path):
    w = exact_world(32, 24, n_frames=40)
    make_tum_dir(tmp_path, w, 4)
    ds = TumDataset(tmp_path, scale=0.5, max_frames=2)
    assert len(ds) == 2 and ds.image(0).shape == (12, 16, 3)


def test_tum_missing_groundtruth(tmp_path):
    w = exact_world(32, 24, n_frames=2)
    make_tum_dir(tmp_path, w, 2)
    (tmp_path / "groundtruth.txt").unlink()
    with pytest.raises(InvalidInput):
        TumDataset(tmp_path)


def test_tum_missing_directory(tmp_path):
    with pytest.raises(InvalidInput):
        TumDataset(tmp_path / "nope")
