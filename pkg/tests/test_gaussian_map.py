import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgslam.errors import EmptyDepth
from dgslam.gaussian_map import (DOWNSAMPLE, FIRST_FRAME_DOWNSAMPLE, NN_SCALE_FACTOR, NN_SCALE_RANGE,
                                 DeformUpdate, GaussianMap, anchor_gaussians, deform_map, densify_and_prune,
                                 prune_by_visibility, read_ply, subsample_stride, write_ply)
from dgslam.geometry import Intrinsics, Pose, random_pose, so3_exp
from dgslam.rasterizer import render

K32 = Intrinsics(32.0, 32.0, 15.5, 15.5, 32, 32)


def plane_map(n=10, logit=2.0, seed=0):
    rng = np.random.default_rng(seed)
    g = GaussianMap()
    g.append(np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(2, 3, n)], np.array([1.0, 0, 0, 0]),
             np.log(np.full((n, 3), 0.05)), np.full(n, logit), rng.uniform(0, 1, (n, 3)), 0, 0)
    return g


def test_defaults_for_downsampling():
    assert (FIRST_FRAME_DOWNSAMPLE, DOWNSAMPLE) == (16, 32)


def test_anchor_count_follows_stride():
    g = GaussianMap()
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    n = anchor_gaussians(g, 0, Pose.identity(), img, np.full((32, 32), 2.0), K32, 16)
    s = subsample_stride(16)
    assert s == 4 and n == len(range(0, 32, s)) ** 2 == 64
    assert len(g) == n and np.all(g.anchor_kf == 0) and np.all(g.birth_kf == 0)


def test_anchor_initial_attributes():
    g = GaussianMap()
    img = np.random.default_rng(0).uniform(size=(32, 32, 3))
    pose = Pose.from_rt(so3_exp(np.array([0.1, -0.2, 0.05])), [0.3, 0.1, -0.2])
    anchor_gaussians(g, 3, pose, img, np.full((32, 32), 2.0), K32, 16)
    assert np.allclose(g.opacity, 0.5)
    assert np.allclose(g.quats, [1, 0, 0, 0])
    # first sample is pixel (0, 0)
    cam = np.array([(0 - K32.cx) / K32.fx * 2, (0 - K32.cy) / K32.fy * 2, 2.0])
    assert np.allclose(g.means[0], pose.R @ cam + pose.t)
    assert np.allclose(g.colors[0], img[0, 0])
    # grid spacing on a fronto-parallel plane: 4 px at depth 2 with fx 32 -> 0.25 m
    assert np.allclose(g.scales, np.clip(NN_SCALE_FACTOR * 0.25, *NN_SCALE_RANGE))


def test_anchor_empty_depth():
    with pytest.raises(EmptyDepth):
        anchor_gaussians(GaussianMap(), 0, Pose.identity(), np.zeros((32, 32, 3)), np.full((32, 32), np.nan), K32)


def test_anchor_index_consistency():
    g = plane_map(6)
    g.append(np.array([[0, 0, 2.0]]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0, np.zeros(3), 5, 5)
    idx = g.anchor_index()
    assert set(idx) == {0, 5} and len(idx[0]) == 6 and list(idx[5]) == [6]
    g.keep(np.arange(len(g)) % 2 == 0)
    idx = g.anchor_index()
    assert sum(len(v) for v in idx.values()) == len(g)
    assert all(np.all(g.anchor_kf[np.isin(g.ids, v)] == k) for k, v in idx.items())


def test_prune_low_opacity_on_schedule():
    g = plane_map(10)
    g.logit_opacity[:3] = np.log(0.6 / 0.4)
    added, removed = densify_and_prune(g, [0], 150)
    assert removed >= 3 and np.all(g.opacity >= 0.7)


def test_off_schedule_is_noop():
    g = plane_map(10)
    g.logit_opacity[:3] = np.log(0.6 / 0.4)
    assert densify_and_prune(g, [0], 149) == (0, 0)
    assert len(g) == 10


def test_visibility_pruning_of_unseen_newborns():
    g = plane_map(4)
    g.birth_kf[:] = [0, 0, 9, 9]
    window = [3, 5, 7, 9]
    vis = {k: np.array([True, True, False, True]) for k in window}
    vis[9] = np.ones(4, bool)
    assert prune_by_visibility(g, window, vis) == 1
    assert list(g.birth_kf) == [0, 0, 9]


def test_visibility_rule_only_when_window_full():
    g = plane_map(4)
    g.birth_kf[:] = 9
    vis = {9: np.ones(4, bool)}
    assert densify_and_prune(g, [9], 150, visibility=vis, window_full=False)[1] == 0
    assert densify_and_prune(g, [9], 300, visibility=vis, window_full=True)[1] == 4


def test_large_footprint_pruned():
    g = plane_map(3)
    g.log_scales[0] = np.log(2.0)
    removed = densify_and_prune(g, [0], 150, K=K32, poses={0: Pose.identity()})[1]
    assert removed == 1 and np.all(g.scales < 1)


@settings(max_examples=25)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12))
def test_prune_keeps_opaque(opacities):
    g = plane_map(len(opacities))
    g.logit_opacity[:] = np.log(np.array(opacities) / (1 - np.array(opacities)))
    opaque_ids = set(g.ids[g.opacity >= 0.7])
    densify_and_prune(g, [0], 150, grad_threshold=np.inf)
    assert set(g.ids) == opaque_ids


def test_densify_clone_and_split():
    g = plane_map(2)
    g.log_scales[1] = np.log(0.5)
    g.grad_accum[:] = [1.0, 1.0]
    g.grad_count[:] = [1, 1]
    added, removed = densify_and_prune(g, [0], 150, scene_extent=10.0)
    assert added == 3 and removed == 1  # one clone, two split children replacing the parent
    assert len(g) == 4
    assert np.allclose(np.sort(g.scales[:, 0])[-2:], 0.5 / 1.6)


def test_deform_identity_is_exact():
    g = plane_map(20, seed=1)
    before = g.copy()
    D = np.full((32, 32), 2.5)
    p = Pose.from_rt(so3_exp(np.array([0.2, 0.1, 0.0])), [0.1, 0.2, 0.3])
    deform_map(g, [DeformUpdate(0, p, p, D, D)], K32)
    assert np.abs(g.means - before.means).max() <= 1e-12
    assert np.abs(g.quats - before.quats).max() <= 1e-12
    assert np.abs(g.log_scales - before.log_scales).max() <= 1e-12


def test_deform_pure_translation():
    g = plane_map(20, seed=2)
    before = g.means.copy()
    D = np.full((32, 32), 2.5)
    t0 = np.array([0.3, -0.1, 0.2])
    deform_map(g, [DeformUpdate(0, Pose.identity(), Pose(t=t0), D, D)], K32)
    assert np.allclose(g.means - before, t0, atol=1e-12)


def test_deform_axis_depth_shift():
    g = GaussianMap()
    g.append(np.array([[0.0, 0.0, 2.0]]), np.array([1.0, 0, 0, 0]), np.log([0.1] * 3), 0.0, np.zeros(3), 0, 0)
    K = Intrinsics(32.0, 32.0, 16.0, 16.0, 33, 33)
    D = np.full((33, 33), 2.0)
    delta = 0.5
    deform_map(g, [DeformUpdate(0, Pose.identity(), Pose.identity(), D, D + delta)], K)
    assert np.allclose(g.means[0], [0, 0, (1 + delta / 2.0) * 2.0], atol=1e-12)
    assert np.allclose(g.scales[0], 0.1 * (1 + delta / 2.0))


def test_deform_falls_back_to_rigid_out_of_frustum():
    g = GaussianMap()
    g.append(np.array([[5.0, 0.0, 1.0]]), np.array([1.0, 0, 0, 0]), np.log([0.1] * 3), 0.0, np.zeros(3), 0, 0)
    D = np.full((32, 32), 1.0)
    t0 = np.array([0.0, 0.0, 1.0])
    deform_map(g, [DeformUpdate(0, Pose.identity(), Pose(t=t0), D, D + 3.0)], K32)
    assert np.allclose(g.means[0], [5, 0, 2]) and np.allclose(g.scales[0], 0.1)


def test_deform_only_touches_anchored():
    g = plane_map(6)
    g.anchor_kf[3:] = 1
    before = g.means.copy()
    D = np.full((32, 32), 2.5)
    n = deform_map(g, [DeformUpdate(1, Pose.identity(), Pose(t=[1, 0, 0]), D, D)], K32)
    assert n == 3
    assert np.allclose(g.means[:3], before[:3]) and np.allclose(g.means[3:], before[3:] + [1, 0, 0])


@settings(max_examples=10)
@given(st.integers(0, 10 ** 6))
def test_rigid_deformation_render_invariance(seed):
    rng = np.random.default_rng(seed)
    K = Intrinsics(24.0, 24.0, 11.5, 11.5, 24, 24)
    g = GaussianMap()
    n = 12
    z = rng.uniform(2, 3, n)
    uv = rng.uniform(3, 20, (n, 2))
    g.append(np.c_[(uv - 11.5) / 24 * z[:, None], z], rng.normal(size=(n, 4)), np.log(rng.uniform(0.05, 0.2, (n, 3))),
             rng.uniform(-1, 2, n), rng.uniform(0, 1, (n, 3)), 0, 0)
    old = random_pose(rng, 0.3, 0.5)
    g.means = g.means @ old.R.T + old.t
    g.quats = np.array([Pose(old.q).compose(Pose(q)).q for q in g.quats])
    new = random_pose(rng, 0.3, 0.5)
    before = render(g, old, K)
    D = np.full((24, 24), 2.5)
    deform_map(g, [DeformUpdate(0, old, new, D, D)], K)
    after = render(g, new, K)
    assert np.abs(after.raw_color - before.raw_color).max() < 1e-5
    assert np.abs(after.depth - before.depth).max() < 1e-5


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    g = plane_map(30, seed=3)
    g.quats = rng.normal(size=(30, 4))
    g.normalize_quats()
    pose = Pose.identity()
    write_ply(g, tmp_path / "m.ply")
    h = read_ply(tmp_path / "m.ply")
    assert len(h) == len(g)
    a, b = render(g, pose, K32), render(h, pose, K32)
    assert np.abs(a.raw_color - b.raw_color).max() < 1e-6
    assert np.abs(a.depth - b.depth).max() < 1e-6
    with open(tmp_path / "m.ply", "rb") as fh:
        head = fh.read(400).split(b"end_header")[0].decode()
    props = [ln.split()[-1] for ln in head.splitlines() if ln.startswith("property")]
    assert props == ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                     "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
