"""Rigid-body transforms, pinhole camera model and pixel/ray algebra.

Poses are camera-to-world: ``transform_point(pose, x)`` maps a point from
camera coordinates to world coordinates. Quaternions are stored ``wxyz``.
Tangent vectors are ordered (rotation, translation) and applied on the left:
``retract(P, d) = exp(d) * P``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

MIN_DEPTH = 1e-8


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a (..., 3) array."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _sinc_terms(theta):
    # A = sin(t)/t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3 with series near 0
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    A = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    B = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / (t * t))
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / (t * t * t))
    return A, B, C


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for (..., 3) rotation vectors."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    A, B, _ = _sinc_terms(theta)
    K = hat(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + A[..., None, None] * K + B[..., None, None] * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    q = rotmat_to_quat(R)
    w = np.clip(q[..., 0], -1.0, 1.0)
    v = q[..., 1:]
    # q and -q are the same rotation; take the short way round
    sign = np.where(w < 0, -1.0, 1.0)
    w = w * sign
    v = v * sign[..., None]
    nv = np.linalg.norm(v, axis=-1)
    theta = 2.0 * np.arctan2(nv, w)
    small = nv < 1e-12
    scale = np.where(small, 2.0 / np.where(small, 1.0, w), theta / np.where(small, 1.0, nv))
    return v * scale[..., None]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method, vectorized; returns wxyz with w >= 0."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    q = np.empty((m.shape[0], 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    diag = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    k = np.argmax(diag, axis=1)
    for idx in range(m.shape[0]):
        a = m[idx]
        if k[idx] == 0:
            s = np.sqrt(1.0 + tr[idx]) * 2
            q[idx] = [0.25 * s, (a[2, 1] - a[1, 2]) / s, (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s]
        elif k[idx] == 1:
            s = np.sqrt(1.0 + a[0, 0] - a[1, 1] - a[2, 2]) * 2
            q[idx] = [(a[2, 1] - a[1, 2]) / s, 0.25 * s, (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s]
        elif k[idx] == 2:
            s = np.sqrt(1.0 + a[1, 1] - a[0, 0] - a[2, 2]) * 2
            q[idx] = [(a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s, 0.25 * s, (a[1, 2] + a[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + a[2, 2] - a[0, 0] - a[1, 1]) * 2
            q[idx] = [(a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s, (a[1, 2] + a[2, 1]) / s, 0.25 * s]
    q[q[:, 0] < 0] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(R.shape[:-2] + (4,))


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    half = 0.5 * theta
    small = theta < 1e-8
    s = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half)[..., None], w * s[..., None]], axis=-1)


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponential map of (..., 6) twists (rotation first). Returns (R, t)."""
    xi = np.asarray(xi, dtype=float)
    w, v = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    A, B, C = _sinc_terms(theta)
    K = hat(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    K2 = K @ K
    R = eye + A[..., None, None] * K + B[..., None, None] * K2
    V = eye + B[..., None, None] * K + C[..., None, None] * K2
    t = (V @ v[..., None])[..., 0]
    return R, t


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    w = so3_log(R)
    theta = np.linalg.norm(w, axis=-1)
    A, B, _ = _sinc_terms(theta)
    K = hat(w)
    small = theta < 1e-4
    th = np.where(small, 1.0, theta)
    # V^-1 = I - K/2 + (1/t^2)(1 - A/(2B)) K^2
    coef = np.where(small, 1.0 / 12.0 + theta ** 2 / 720.0, (1.0 - A / (2.0 * B)) / (th * th))
    eye = np.broadcast_to(np.eye(3), K.shape)
    Vinv = eye - 0.5 * K + coef[..., None, None] * (K @ K)
    v = (Vinv @ np.asarray(t, dtype=float)[..., None])[..., 0]
    return np.concatenate([w, v], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform (unit quaternion wxyz + translation in meters)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(rotmat_to_quat(np.asarray(R, dtype=float)), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi) -> "Pose":
        R, t = se3_exp(xi)
        return cls.from_rt(R, t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def entries(self) -> np.ndarray:
        """The 12 entries of [R | t], row-major."""
        return self.matrix()[:3].ravel()

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        R = self.R
        return Pose(quat_multiply(self.q, other.q), R @ other.t + self.t)

    __matmul__ = compose

    def log(self) -> np.ndarray:
        return se3_log(self.R, self.t)

    def center(self) -> np.ndarray:
        return self.t.copy()

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.entries(), other.entries(), atol=atol, rtol=0))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-center convention)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return Intrinsics(self.fx * factor, self.fy * factor,
                          (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5, w, h)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) coordinate arrays of shape (H, W) at pixel centers."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        return u, v

    def rays(self) -> np.ndarray:
        """K^-1 [u, v, 1] for every pixel, shape (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def transform_point(pose: Pose, x) -> np.ndarray:
    """R x + t; accepts (3,) or (N, 3)."""
    x = np.asarray(x, dtype=float)
    return x @ pose.R.T + pose.t


def project(K: Intrinsics, x_cam) -> np.ndarray:
    """Pinhole projection; returns (u, v, z) with the same leading shape as ``x_cam``."""
    x = np.asarray(x_cam, dtype=float)
    z = x[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = K.fx * x[..., 0] / z + K.cx
    v = K.fy * x[..., 1] / z + K.cy
    return np.stack([u, v, z], axis=-1)


def unproject(K: Intrinsics, u, v, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth * np.ones_like(u)], axis=-1)


def retract(pose: Pose, delta) -> Pose:
    """Left-multiplicative update exp(delta) * pose."""
    dR, dt = se3_exp(np.asarray(delta, dtype=float))
    R = pose.R
    return Pose.from_rt(dR @ R, dR @ pose.t + dt)


def retract_jacobian(pose: Pose) -> np.ndarray:
    """d entries(retract(pose, delta)) / d delta at delta = 0, shape (12, 6)."""
    R, t = pose.R, pose.t
    J = np.zeros((12, 6))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        dR = hat(e) @ R
        dt = hat(e) @ t
        J[:, k] = np.hstack([dR, dt[:, None]]).ravel()
    for k in range(3):
        dt = np.zeros(3)
        dt[k] = 1.0
        J[:, 3 + k] = np.hstack([np.zeros((3, 3)), dt[:, None]]).ravel()
    return J


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    Rs = np.stack([p.R for p in poses])
    ts = np.stack([p.t for p in poses])
    return Rs, ts


def random_pose(rng: np.random.Generator, max_angle: float = np.pi * 0.9, max_trans: float = 2.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return Pose.from_rt(so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, size=3))
