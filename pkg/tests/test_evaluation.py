import numpy as np
import pytest
from hypothesis import given, strategies as st

from dgslam.errors import DegenerateGeometry, DimensionMismatch, EmptyOverlap
from dgslam.evaluation import align_sim3, ate_rmse, depth_l1, image_metrics, psnr, ssim
from dgslam.geometry import Pose, so3_exp

from oracles import ssim_direct, umeyama_brute


def random_sim3(rng):
    return np.exp(rng.uniform(-1, 1)), so3_exp(rng.normal(size=3)), rng.normal(size=3) * 3


def trajectory(rng, n=10):
    return rng.normal(size=(n, 3)) * 2


# --- alignment ----------------------------------------------------------------

def test_align_identity():
    X = trajectory(np.random.default_rng(0))
    s, R, t = align_sim3(X, X)
    assert s == pytest.approx(1.0, abs=1e-12) and np.allclose(R, np.eye(3)) and np.allclose(t, 0, atol=1e-12)


def test_align_scale_two():
    X = trajectory(np.random.default_rng(1))
    s, R, t = align_sim3(2.0 * X, X)
    assert abs(s - 0.5) < 1e-9
    s, _, _ = align_sim3(X, 2.0 * X)
    assert abs(s - 2.0) < 1e-9


@given(st.integers(0, 10_000))
def test_align_recovers_random_sim3(seed):
    rng = np.random.default_rng(seed)
    gt = trajectory(rng)
    s, R, t = random_sim3(rng)
    est = s * gt @ R.T + t
    s2, R2, t2 = align_sim3(est, gt)
    # the inverse similarity
    assert abs(s2 - 1 / s) < 1e-9
    assert np.allclose(R2, R.T, atol=1e-9)
    assert np.allclose(t2, -R.T @ t / s, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_align_matches_numerical_minimizer(seed):
    rng = np.random.default_rng(seed)
    gt = trajectory(rng)
    s, R, t = random_sim3(rng)
    est = s * gt @ R.T + t + 0.05 * rng.normal(size=gt.shape)
    s1, R1, t1 = align_sim3(est, gt)
    s2, R2, t2 = umeyama_brute(est, gt)
    c1 = np.sum((gt - (s1 * est @ R1.T + t1)) ** 2)
    c2 = np.sum((gt - (s2 * est @ R2.T + t2)) ** 2)
    assert c1 <= c2 + 1e-10
    assert abs(s1 - s2) < 1e-6 and np.allclose(R1, R2, atol=1e-6) and np.allclose(t1, t2, atol=1e-6)


def test_align_degenerate():
    with pytest.raises(DegenerateGeometry):
        align_sim3(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometry):
        align_sim3(line, line)


def test_align_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        align_sim3(np.zeros((4, 3)), np.zeros((5, 3)))


# --- ATE ------------------------------------------------------------------------

def test_ate_identical_zero():
    X = trajectory(np.random.default_rng(2))
    assert ate_rmse(X, X) == pytest.approx(0.0, abs=1e-9)


def test_ate_constant_offset_no_align():
    X = trajectory(np.random.default_rng(3))
    assert ate_rmse(X + [0.01, 0, 0], X, align=False) == pytest.approx(1.0)


def test_ate_two_pose_hand_value():
    est = {0: Pose(t=[0, 0, 0]), 1: Pose(t=[1, 0, 0])}
    gt = {0: Pose(t=[0, 0, 0.03]), 1: Pose(t=[1, 0.04, 0])}
    # residuals 3 cm and 4 cm -> sqrt((9 + 16) / 2)
    assert ate_rmse(est, gt, align=False) == pytest.approx(np.sqrt(12.5))


def test_ate_matches_by_frame_id():
    est = [(0, Pose(t=[0, 0, 0])), (5, Pose(t=[1, 0, 0])), (9, Pose(t=[9, 9, 9]))]
    gt = {0: Pose(t=[0, 0, 0]), 5: Pose(t=[1, 0, 0]), 7: Pose(t=[3, 3, 3])}
    assert ate_rmse(est, gt, align=False) == 0.0


def test_ate_no_overlap():
    with pytest.raises(EmptyOverlap):
        ate_rmse({0: Pose()}, {1: Pose()}, align=False)


def test_ate_rejects_unordered_ids():
    with pytest.raises(ValueError):
        ate_rmse([(1, Pose()), (0, Pose())], {0: Pose(), 1: Pose()}, align=False)


@given(st.integers(0, 10_000))
def test_ate_sim3_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = trajectory(rng)
    est = gt + 0.02 * rng.normal(size=gt.shape)
    s, R, t = random_sim3(rng)
    assert ate_rmse(s * est @ R.T + t, gt) == pytest.approx(ate_rmse(est, gt), abs=1e-9)


# --- image metrics -------------------------------------------------------------

def test_identical_images():
    img = np.random.default_rng(0).uniform(size=(20, 24, 3))
    d = np.full((20, 24), 2.0)
    p, s, l1 = image_metrics(img, img, d, d)
    assert p == 100.0 and s == pytest.approx(1.0, abs=1e-12) and l1 == 0.0


def test_psnr_uniform_offset():
    a = np.full((16, 16, 3), 0.5)
    assert psnr(a + 0.1, a) == pytest.approx(20.0)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(32, 32, 3))
    base = rng.uniform(-1, 1, img.shape)
    vals = [psnr(img + amp * base, img) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def checkerboard(H=24, W=24, cell=3):
    v, u = np.indices((H, W))
    return ((u // cell + v // cell) % 2).astype(float)


def test_ssim_checkerboard_vs_oracle():
    a = checkerboard()
    assert abs(ssim(a, 1 - a) - ssim_direct(a, 1 - a)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_ssim_random_color_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 18, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-6


def test_ssim_too_small():
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_depth_l1_centimeters_and_validity():
    a = np.array([[1.0, 2.0], [np.nan, 0.0]])
    b = np.array([[1.01, 2.03], [1.0, 1.0]])
    assert depth_l1(a, b) == pytest.approx(2.0)


def test_metric_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(DimensionMismatch):
        depth_l1(np.zeros((4, 4)), np.zeros((5, 4)))
