"""Dense bundle adjustment (DBA) and the mono-regularized DSPO refinement.

Pose tangents are left perturbations T <- exp(xi) T of camera-to-world poses.
Disparities are eliminated per pixel with a scalar Schur complement, leaving a
6N x 6N reduced pose system.
"""
from __future__ import annotations

import numba
import numpy as np

from ..errors import DegenerateFit, SingularSystem
from ..geometry import Pose, hat, se3_exp
from .graph import FactorGraph

MIN_Z = 0.01
MIN_DISP = 1e-3
NULL_TOL = 1e-9
GAUGE_DIMS = 1  # monocular scale
LAMBDA_BOUNDS = (1e-10, 1e10)


def fit_scale_shift(target, mono, mask=None, space: str = "disparity") -> tuple[float, float]:
    """Least squares (theta, gamma) with target ~ theta * x + gamma.

    ``space='disparity'`` regresses on x = 1/mono, ``space='depth'`` on x = mono.
    """
    target = np.asarray(target, dtype=float).ravel()
    mono = np.asarray(mono, dtype=float).ravel()
    with np.errstate(divide="ignore", invalid="ignore"):
        x = 1.0 / mono if space == "disparity" else mono.copy()
    ok = np.isfinite(x) & np.isfinite(target)
    if space == "disparity":
        ok &= mono > 0
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool).ravel()
    if ok.sum() < 2:
        raise DegenerateFit("fewer than two valid pixels")
    x, y = x[ok], target[ok]
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = dx @ dx
    if sxx <= 1e-14 * max(1.0, xm * xm) * len(x):
        raise DegenerateFit("constant regressor")
    theta = (dx @ (y - ym)) / sxx
    return float(theta), float(ym - theta * xm)


# --- edge linearization -----------------------------------------------------

def _edge_geometry(graph: FactorGraph, e, disparity=None):
    K = graph.K
    ki, kj = graph.keyframes[e.i], graph.keyframes[e.j]
    Ri, ti = ki.pose.R, ki.pose.t
    Rj, tj = kj.pose.R, kj.pose.t
    d = (ki.disparity if disparity is None else disparity).ravel()
    q = graph.rays
    dok = np.isfinite(d) & (d > 0)
    ds = np.where(dok, d, 1.0)
    Xi = q / ds[:, None]
    Wp = Xi @ Ri.T + ti
    Xj = (Wp - tj) @ Rj
    z = Xj[:, 2]
    ok = dok & (z > MIN_Z)
    zs = np.where(ok, z, 1.0)
    u = K.fx * Xj[:, 0] / zs + K.cx
    v = K.fy * Xj[:, 1] / zs + K.cy
    target = e.target.reshape(-1, 2)
    r = target - np.stack([u, v], axis=1)
    w = np.where(ok[:, None], e.weight.reshape(-1, 2), 0.0)
    r = np.where(ok[:, None], r, 0.0)
    return dict(q=q, d=ds, Wp=Wp, Xj=Xj, z=zs, r=r, w=w, Ri=Ri, Rj=Rj)


@numba.njit(cache=True)
def _edge_kernel(q, d, Ri, ti, Rj, tj, fx, fy, cx, cy, target, weight, jac):
    """Fused residual, Jacobians and normal-equation blocks of one flow edge."""
    P = q.shape[0]
    He = np.zeros((6, 6))
    ge = np.zeros(6)
    hd = np.zeros(P)
    gd = np.zeros(P)
    E = np.zeros((P, 6))
    valid = np.zeros(P, np.bool_)
    cost = 0.0
    RjT = Rj.T.copy()
    A = RjT @ Ri
    t_rel = RjT @ (ti - tj)
    Ji = np.zeros((2, 6))
    for p in range(P):
        dp = d[p]
        if not (dp > 0.0) or not np.isfinite(dp):
            continue
        X0, X1, X2 = q[p, 0] / dp, q[p, 1] / dp, q[p, 2] / dp
        x = A[0, 0] * X0 + A[0, 1] * X1 + A[0, 2] * X2 + t_rel[0]
        y = A[1, 0] * X0 + A[1, 1] * X1 + A[1, 2] * X2 + t_rel[1]
        z = A[2, 0] * X0 + A[2, 1] * X1 + A[2, 2] * X2 + t_rel[2]
        if z <= MIN_Z:
            continue
        w0, w1 = weight[p, 0], weight[p, 1]
        r0 = target[p, 0] - (fx * x / z + cx)
        r1 = target[p, 1] - (fy * y / z + cy)
        valid[p] = w0 > 0.0
        cost += w0 * r0 * r0 + w1 * r1 * r1
        if not jac:
            continue
        # B = Jp R_j^T
        b00, b02 = fx / z, -fx * x / (z * z)
        b11, b12 = fy / z, -fy * y / (z * z)
        W0 = Ri[0, 0] * X0 + Ri[0, 1] * X1 + Ri[0, 2] * X2 + ti[0]
        W1 = Ri[1, 0] * X0 + Ri[1, 1] * X1 + Ri[1, 2] * X2 + ti[1]
        W2 = Ri[2, 0] * X0 + Ri[2, 1] * X1 + Ri[2, 2] * X2 + ti[2]
        for c in range(2):
            if c == 0:
                B0 = b00 * RjT[0, 0] + b02 * RjT[2, 0]
                B1 = b00 * RjT[0, 1] + b02 * RjT[2, 1]
                B2 = b00 * RjT[0, 2] + b02 * RjT[2, 2]
            else:
                B0 = b11 * RjT[1, 0] + b12 * RjT[2, 0]
                B1 = b11 * RjT[1, 1] + b12 * RjT[2, 1]
                B2 = b11 * RjT[1, 2] + b12 * RjT[2, 2]
            # rotation part B x W, translation part -B
            Ji[c, 0] = B1 * W2 - B2 * W1
            Ji[c, 1] = B2 * W0 - B0 * W2
            Ji[c, 2] = B0 * W1 - B1 * W0
            Ji[c, 3] = -B0
            Ji[c, 4] = -B1
            Ji[c, 5] = -B2
        # disparity Jacobian Jp A q / d^2
        s = 1.0 / (dp * dp)
        aq0 = (A[0, 0] * q[p, 0] + A[0, 1] * q[p, 1] + A[0, 2] * q[p, 2]) * s
        aq1 = (A[1, 0] * q[p, 0] + A[1, 1] * q[p, 1] + A[1, 2] * q[p, 2]) * s
        aq2 = (A[2, 0] * q[p, 0] + A[2, 1] * q[p, 1] + A[2, 2] * q[p, 2]) * s
        jd0 = b00 * aq0 + b02 * aq2
        jd1 = b11 * aq1 + b12 * aq2
        hd[p] = w0 * jd0 * jd0 + w1 * jd1 * jd1
        gd[p] = w0 * jd0 * r0 + w1 * jd1 * r1
        for a in range(6):
            wa0, wa1 = w0 * Ji[0, a], w1 * Ji[1, a]
            ge[a] += wa0 * r0 + wa1 * r1
            E[p, a] = wa0 * jd0 + wa1 * jd1
            for b in range(a, 6):
                He[a, b] += wa0 * Ji[0, b] + wa1 * Ji[1, b]
    for a in range(6):
        for b in range(a):
            He[a, b] = He[b, a]
    return cost, He, ge, hd, gd, E, valid


def _edge_terms(graph: FactorGraph, e, jac: bool = True):
    """(cost, He, ge, hd, gd, E, valid) of edge ``e`` at the current estimates."""
    K = graph.K
    ki, kj = graph.keyframes[e.i], graph.keyframes[e.j]
    return _edge_kernel(graph.rays, np.ascontiguousarray(ki.disparity.ravel(), dtype=float),
                        ki.pose.R, ki.pose.t, kj.pose.R, kj.pose.t, K.fx, K.fy, K.cx, K.cy,
                        np.ascontiguousarray(e.target.reshape(-1, 2), dtype=float),
                        np.ascontiguousarray(e.weight.reshape(-1, 2), dtype=float), jac)


def edge_residual(graph: FactorGraph, e) -> tuple[np.ndarray, np.ndarray]:
    """(residual (P, 2), weight (P, 2)) of one edge; weight is 0 where undefined."""
    g = _edge_geometry(graph, e)
    return g["r"], g["w"]


def graph_residual(graph: FactorGraph, edges=None) -> float:
    """Weighted squared reprojection error summed over ``edges`` (default: all)."""
    return float(sum(_edge_terms(graph, e, jac=False)[0] for e in (graph.edges if edges is None else edges)))


def _linearize(graph: FactorGraph, e):
    g = _edge_geometry(graph, e)
    K = graph.K
    X, z = g["Xj"], g["z"]
    P = X.shape[0]
    Jp = np.zeros((P, 2, 3))
    Jp[:, 0, 0] = K.fx / z
    Jp[:, 0, 2] = -K.fx * X[:, 0] / (z * z)
    Jp[:, 1, 1] = K.fy / z
    Jp[:, 1, 2] = -K.fy * X[:, 1] / (z * z)
    RjT = g["Rj"].T
    dX = np.empty((P, 3, 6))
    dX[:, :, :3] = -RjT @ hat(g["Wp"])
    dX[:, :, 3:] = RjT
    Ji = -Jp @ dX  # residual is target - projection
    dXd = -(g["q"] @ (RjT @ g["Ri"]).T) / (g["d"] ** 2)[:, None]
    Jd = -np.einsum("pcx,px->pc", Jp, dXd)
    return g["r"], g["w"], Ji, Jd


def _edge_blocks(r, w, Ji, Jd):
    WJ = w[:, :, None] * Ji
    H = np.einsum("pca,pcb->ab", WJ, Ji)
    gvec = np.einsum("pca,pc->a", WJ, r)
    Hd = np.sum(w * Jd * Jd, axis=1)
    gd = np.sum(w * Jd * r, axis=1)
    E = np.einsum("pca,pc->pa", WJ, Jd)
    return H, gvec, Hd, gd, E


def _resolve_nodes(graph, active, fixed):
    active = sorted(set(int(a) for a in active))
    if fixed is None:
        fixed = {0}
    fixed = set(int(f) for f in fixed)
    free_pose = [a for a in active if a not in fixed]
    return active, free_pose


def _null_dims(S: np.ndarray) -> int:
    if S.size == 0:
        return 0
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    top = max(float(np.max(np.abs(ev))), 0.0)
    if top == 0.0:
        return S.shape[0]
    return int(np.sum(ev <= NULL_TOL * top))


def _snapshot(graph, nodes):
    return {n: (graph.keyframes[n].pose, graph.keyframes[n].disparity.copy(),
                graph.keyframes[n].scale, graph.keyframes[n].shift) for n in nodes}


def _restore(graph, snap):
    for n, (pose, disp, s, b) in snap.items():
        kf = graph.keyframes[n]
        kf.pose, kf.disparity, kf.scale, kf.shift = pose, disp, s, b


def _valid_counts(graph, edges, nodes):
    P = graph.rays.shape[0]
    out = {n: np.zeros(P, dtype=np.int64) for n in nodes}
    for e in edges:
        if e.i in out:
            out[e.i] += _edge_terms(graph, e, jac=False)[6]
    return out


def _revert_escapes(graph, edges, nodes, snap, before) -> None:
    """Undo disparity updates that moved a pixel out of some of its observations.

    Such pixels leave the residual, so the objective alone would reward the escape.
    """
    after = _valid_counts(graph, edges, nodes)
    for n in nodes:
        lost = after[n] < before[n]
        if lost.any():
            kf = graph.keyframes[n]
            flat = kf.disparity.ravel().copy()
            flat[lost] = snap[n][1].ravel()[lost]
            kf.disparity = flat.reshape(kf.disparity.shape)


def dba_step(graph: FactorGraph, active, fixed=None) -> float:
    """One Levenberg-Marquardt damped Gauss-Newton iteration of the DBA objective.

    ``active`` nodes have free disparities and, unless listed in ``fixed``
    (default: the first keyframe), free poses. Returns the weighted squared
    residual after the step (the old one if the step was rejected).
    """
    active, free_pose = _resolve_nodes(graph, active, fixed)
    act = set(active)
    edges = [e for e in graph.edges if e.i in act or e.j in act]
    if not edges:
        raise SingularSystem("no edges touch the active nodes")
    pidx = {n: k for k, n in enumerate(free_pose)}
    npose = 6 * len(free_pose)
    H = np.zeros((npose, npose))
    g = np.zeros(npose)
    P = graph.rays.shape[0]
    Hd = {n: np.zeros(P) for n in active}
    gd = {n: np.zeros(P) for n in active}
    coupling = {n: {} for n in active}
    E0 = 0.0
    seen = {n: np.zeros(P, dtype=np.int64) for n in active}
    for e in edges:
        cost, He, ge, hd, gde, Ep, valid = _edge_terms(graph, e)
        E0 += cost
        if e.i in act:
            seen[e.i] += valid
        bi, bj = pidx.get(e.i), pidx.get(e.j)
        for b, s in ((bi, 1.0), (bj, -1.0)):
            if b is not None:
                g[6 * b:6 * b + 6] += s * ge
                H[6 * b:6 * b + 6, 6 * b:6 * b + 6] += He
        if bi is not None and bj is not None:
            H[6 * bi:6 * bi + 6, 6 * bj:6 * bj + 6] -= He
            H[6 * bj:6 * bj + 6, 6 * bi:6 * bi + 6] -= He
        if e.i in act:
            Hd[e.i] += hd
            gd[e.i] += gde
            cp = coupling[e.i]
            for b, s in ((bi, 1.0), (bj, -1.0)):
                if b is not None:
                    cp[b] = cp.get(b, 0.0) + s * Ep
    # Schur complement of the disparities (undamped copy for the rank test)
    lam = graph.damping["dba"]
    S = H.copy()
    S_damped = H + lam * np.diag(np.diag(H))
    rhs = g.copy()
    inv = {}
    for n in active:
        h = Hd[n]
        hdamp = h * (1.0 + lam)
        inv_u = np.where(h > 0, 1.0 / np.where(h > 0, h, 1.0), 0.0)
        inv_d = np.where(h > 0, 1.0 / np.where(h > 0, hdamp, 1.0), 0.0)
        inv[n] = inv_d
        blocks = sorted(coupling[n])
        if not blocks:
            continue
        C = np.concatenate([coupling[n][b] for b in blocks], axis=1)
        cols = np.concatenate([np.arange(6 * b, 6 * b + 6) for b in blocks])
        S[np.ix_(cols, cols)] -= C.T @ (C * inv_u[:, None])
        S_damped[np.ix_(cols, cols)] -= C.T @ (C * inv_d[:, None])
        rhs[cols] -= C.T @ (gd[n] * inv_d)
    if npose:
        nd = _null_dims(S)
        if nd > GAUGE_DIMS or not np.any(S):
            raise SingularSystem(f"reduced pose system has {nd} null directions")
        jitter = 1e-12 * max(float(np.max(np.abs(np.diag(S_damped)))), 1e-300)
        dp = np.linalg.solve(S_damped + jitter * np.eye(npose), -rhs)
    else:
        if not any(np.any(Hd[n] > 0) for n in active):
            raise SingularSystem("no observed disparities")
        dp = np.zeros(0)
    snap = _snapshot(graph, active)
    for n in active:
        cp = coupling[n]
        corr = np.zeros(P)
        for b, C in cp.items():
            corr += C @ dp[6 * b:6 * b + 6]
        dd = (-gd[n] - corr) * inv[n]
        kf = graph.keyframes[n]
        flat = kf.disparity.ravel()
        upd = np.where(Hd[n] > 0, np.maximum(flat + dd, MIN_DISP), flat)
        kf.disparity = upd.reshape(kf.disparity.shape)
    for n, b in pidx.items():
        kf = graph.keyframes[n]
        dR, dt = se3_exp(dp[6 * b:6 * b + 6])
        kf.pose = Pose.from_rt(dR @ kf.pose.R, dR @ kf.pose.t + dt)
    _revert_escapes(graph, edges, active, snap, seen)
    E1 = graph_residual(graph, edges)
    if E1 <= E0:
        graph.damping["dba"] = max(lam / 10.0, LAMBDA_BOUNDS[0])
        return E1
    _restore(graph, snap)
    graph.damping["dba"] = min(lam * 10.0, LAMBDA_BOUNDS[1])
    return E0


# --- DSPO -------------------------------------------------------------------

def _mono_terms(kf, alpha1, alpha2):
    x = kf.mono_regressor.ravel()
    d = kf.disparity.ravel()
    ok = np.isfinite(x) & kf.valid.ravel()
    low = kf.low_error.ravel() & ok
    high = ~kf.low_error.ravel() & ok
    return x, d, low, high


def dspo_objective(graph: FactorGraph, active, edges=None) -> float:
    cfg = graph.config
    act = set(active)
    if edges is None:
        edges = [e for e in graph.edges if e.i in act]
    total = graph_residual(graph, edges)
    for n in act:
        kf = graph.keyframes[n]
        x, d, low, high = _mono_terms(kf, cfg.alpha1, cfg.alpha2)
        m = d - kf.scale * np.where(np.isfinite(x), x, 0.0) - kf.shift
        total += cfg.alpha1 * float(np.sum(m[high] ** 2)) + cfg.alpha2 * float(np.sum(m[low] ** 2))
    return total


def dspo_step(graph: FactorGraph, active) -> float:
    """One damped Gauss-Newton iteration over high-error disparities, scales and shifts (poses frozen)."""
    cfg = graph.config
    a1, a2 = cfg.alpha1, cfg.alpha2
    active = sorted(set(int(a) for a in active))
    act = set(active)
    edges = [e for e in graph.edges if e.i in act]
    P = graph.rays.shape[0]
    Hd = {n: np.zeros(P) for n in active}
    gd = {n: np.zeros(P) for n in active}
    seen = {n: np.zeros(P, dtype=np.int64) for n in active}
    for e in edges:
        _, _, _, hd, gde, _, valid = _edge_terms(graph, e)
        seen[e.i] += valid
        Hd[e.i] += hd
        gd[e.i] += gde
    E0 = dspo_objective(graph, active, edges)
    lam = graph.damping["dspo"]
    steps = {}
    for n in active:
        kf = graph.keyframes[n]
        x, d, low, high = _mono_terms(kf, a1, a2)
        used = low | high
        if used.sum() < 2 or np.ptp(x[used]) <= 1e-12 * max(1.0, float(np.abs(x[used]).max())):
            raise DegenerateFit(f"keyframe {n}: mono regressor is constant")
        xs = np.where(used, x, 0.0)
        m = d - kf.scale * xs - kf.shift
        wm = np.where(high, a1, 0.0) + np.where(low, a2, 0.0)
        hdd = np.where(high, Hd[n] + a1, 0.0)
        g_d = np.where(high, gd[n] + a1 * m, 0.0)
        H2 = np.array([[np.sum(wm * xs * xs), np.sum(wm * xs)], [np.sum(wm * xs), np.sum(wm)]])
        g2 = np.array([-np.sum(wm * xs * m), -np.sum(wm * m)])
        H2d = H2 + lam * np.diag(np.diag(H2))
        hdd_d = hdd * (1.0 + lam)
        inv = np.where(high, 1.0 / np.where(high, hdd_d, 1.0), 0.0)
        B = np.stack([-a1 * xs, -a1 * np.ones(P)], axis=1) * high[:, None]
        S2 = H2d - B.T @ (B * inv[:, None])
        rhs = g2 - B.T @ (g_d * inv)
        d2 = np.linalg.solve(S2, -rhs)
        dd = (-g_d - B @ d2) * inv
        steps[n] = (dd, d2, high)
    snap = _snapshot(graph, active)
    for n, (dd, d2, high) in steps.items():
        kf = graph.keyframes[n]
        flat = kf.disparity.ravel()
        kf.disparity = np.where(high, np.maximum(flat + dd, MIN_DISP), flat).reshape(kf.disparity.shape)
        kf.scale = float(kf.scale + d2[0])
        kf.shift = float(kf.shift + d2[1])
    _revert_escapes(graph, edges, active, snap, seen)
    E1 = dspo_objective(graph, active, edges)
    if E1 <= E0:
        graph.damping["dspo"] = max(lam / 10.0, LAMBDA_BOUNDS[0])
        return E1
    _restore(graph, snap)
    graph.damping["dspo"] = min(lam * 10.0, LAMBDA_BOUNDS[1])
    return E0


def init_scale_shift(graph: FactorGraph, n: int) -> tuple[float, float]:
    """Initialize (theta, gamma) of keyframe ``n`` from its low-error disparities."""
    kf = graph.keyframes[n]
    mask = kf.low_error & kf.valid
    if mask.sum() < 2:
        mask = kf.valid
    kf.scale, kf.shift = fit_scale_shift(kf.disparity, kf.mono_depth, mask, space="disparity")
    return kf.scale, kf.shift


def run_alternation(graph: FactorGraph, active, rounds: int, dba_per_round: int = 2, fixed=None,
                    dspo: bool = True) -> float:
    """``rounds`` x (``dba_per_round`` DBA steps then one DSPO step)."""
    res = np.nan
    for _ in range(rounds):
        for _ in range(dba_per_round):
            res = dba_step(graph, active, fixed)
        if dspo:
            dspo_step(graph, active)
    return res
