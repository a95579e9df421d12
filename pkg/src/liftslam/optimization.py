"""Least-squares machinery: reprojection BA, pose-only refinement, Sim3 fitting
and pose-graph optimization over similarity transforms.

Pose updates are left-multiplicative: ``R <- exp(w) R``, ``t <- exp(w) t + rho``
with the tangent ordered ``(w, rho)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateConfiguration, SingularSystem, TooFewMatches
from .geometry import DEPTH_EPS, CameraIntrinsics, PoseSE3, Sim3

CHI2_2DOF = 5.99


@dataclass
class LMConfig:
    max_iters: int = 50
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e12
    cost_tolerance: float = 1e-12
    abs_tolerance: float = 1e-24
    huber_delta: float | None = 2.45

    def __post_init__(self):
        for name in ("max_iters", "initial_lambda", "lambda_up", "lambda_max", "cost_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lambda_down < 1:
            raise ValueError("lambda_down must be in (0, 1)")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class ReprojectionProblem:
    cam: CameraIntrinsics
    poses: list  # PoseSE3 per camera block
    points: np.ndarray  # (P, 3)
    cam_idx: np.ndarray  # (M,) camera block of each observation
    pt_idx: np.ndarray  # (M,) point block of each observation
    uv: np.ndarray  # (M, 2) observed pixels
    fixed_poses: np.ndarray | None = None
    fixed_points: np.ndarray | None = None
    sigma: np.ndarray | None = None  # per-observation pixel scale

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float).reshape(-1, 3)
        self.cam_idx = np.asarray(self.cam_idx, dtype=np.int64)
        self.pt_idx = np.asarray(self.pt_idx, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        nc, npt = len(self.poses), len(self.points)
        if self.fixed_poses is None:
            self.fixed_poses = np.zeros(nc, dtype=bool)
        if self.fixed_points is None:
            self.fixed_points = np.zeros(npt, dtype=bool)
        self.fixed_poses = np.asarray(self.fixed_poses, dtype=bool)
        self.fixed_points = np.asarray(self.fixed_points, dtype=bool)
        if self.sigma is None:
            self.sigma = np.ones(len(self.uv))
        m = len(self.uv)
        if not (len(self.cam_idx) == len(self.pt_idx) == m):
            raise ValueError("observation arrays differ in length")
        if m and (self.cam_idx.max() >= nc or self.pt_idx.max() >= npt or self.cam_idx.min() < 0 or self.pt_idx.min() < 0):
            raise ValueError("observation references a missing block")

    def copy(self):
        return ReprojectionProblem(
            self.cam, list(self.poses), self.points.copy(), self.cam_idx, self.pt_idx, self.uv,
            self.fixed_poses.copy(), self.fixed_points.copy(), self.sigma,
        )


def _stack_poses(poses):
    R = np.array([p.R for p in poses]).reshape(-1, 3, 3)
    t = np.array([p.t for p in poses]).reshape(-1, 3)
    return R, t


def residual_and_jacobian(pose: PoseSE3, point, uv, cam: CameraIntrinsics):
    """Residual ``uv - project(point)`` and its Jacobians wrt the pose tangent and the point.

    Returns ``None`` when the point is behind the camera.
    """
    r, Jc, Jp, ok = _batch(np.array([pose.R]), np.array([pose.t]), np.zeros(1, int),
                           np.asarray(point, float).reshape(1, 3), np.asarray(uv, float).reshape(1, 2), cam)
    if not ok[0]:
        return None
    return r[0], Jc[0], Jp[0]


def _batch(R, t, ci, X, uv, cam):
    """Residuals and Jacobians for many observations; ``X`` is per observation."""
    pc = (R[ci] @ X[:, :, None])[:, :, 0] + t[ci]
    z = pc[:, 2]
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]
    proj = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    r = uv - proj
    m = len(pc)
    dpi = np.zeros((m, 2, 3))
    dpi[:, 0, 0] = cam.fx / zs
    dpi[:, 0, 2] = -cam.fx * x / zs**2
    dpi[:, 1, 1] = cam.fy / zs
    dpi[:, 1, 2] = -cam.fy * y / zs**2
    # d pc / d(w, rho) = [-[pc]x, I]
    skew = np.zeros((m, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = z, -y
    skew[:, 1, 0], skew[:, 1, 2] = -z, x
    skew[:, 2, 0], skew[:, 2, 1] = y, -x
    Jc = np.empty((m, 2, 6))
    Jc[:, :, :3] = -(dpi @ skew)
    Jc[:, :, 3:] = -dpi
    Jp = -(dpi @ R[ci])
    return r, Jc, Jp, ok


def _robust(e2, delta):
    """Huber cost and IRLS weight from squared residual norms."""
    if delta is None:
        return e2, np.ones_like(e2)
    e = np.sqrt(e2)
    inl = e <= delta
    cost = np.where(inl, e2, 2 * delta * e - delta * delta)
    w = np.where(inl, 1.0, delta / np.maximum(e, 1e-300))
    return cost, w


def problem_cost(problem: ReprojectionProblem, cfg: LMConfig | None = None, poses=None, points=None):
    cfg = cfg or LMConfig()
    poses = problem.poses if poses is None else poses
    points = problem.points if points is None else points
    R, t = _stack_poses(poses)
    r, _, _, ok = _batch(R, t, problem.cam_idx, points[problem.pt_idx], problem.uv, problem.cam)
    r = r / problem.sigma[:, None]
    c, _ = _robust((r * r).sum(axis=1), cfg.huber_delta)
    return 0.5 * float(c[ok].sum())


def reprojection_errors(problem: ReprojectionProblem):
    """Pixel error norm per observation (``inf`` when behind the camera)."""
    R, t = _stack_poses(problem.poses)
    r, _, _, ok = _batch(R, t, problem.cam_idx, problem.points[problem.pt_idx], problem.uv, problem.cam)
    e = np.linalg.norm(r, axis=1)
    e[~ok] = np.inf
    return e


def _accumulate(index, values, size):
    """Sum rows of ``values`` (n, ...) into ``size`` bins keyed by ``index``."""
    width = int(np.prod(values.shape[1:], dtype=np.int64))
    flat = values.reshape(len(values), width)
    out = np.empty((size, width))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(index, weights=flat[:, k], minlength=size)
    return out.reshape((size,) + values.shape[1:])


@dataclass
class LMResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def solve_lm(problem: ReprojectionProblem, cfg: LMConfig | None = None) -> LMResult:
    """Levenberg-Marquardt with the point blocks eliminated by a dense Schur complement.

    Updates ``problem.poses`` and ``problem.points`` in place. Fixed blocks are
    never touched.
    """
    cfg = cfg or LMConfig()
    cam = problem.cam
    nc, npt = len(problem.poses), len(problem.points)
    free_c = np.flatnonzero(~problem.fixed_poses)
    free_p = np.flatnonzero(~problem.fixed_points)
    cmap = np.full(nc, -1)
    cmap[free_c] = np.arange(len(free_c))
    pmap = np.full(npt, -1)
    pmap[free_p] = np.arange(len(free_p))
    nfc, nfp = len(free_c), len(free_p)
    ci, pi = problem.cam_idx, problem.pt_idx
    oc, op = cmap[ci], pmap[pi]
    sig = problem.sigma[:, None]

    sel = np.flatnonzero((oc >= 0) & (op >= 0))

    def evaluate(poses, points):
        R, t = _stack_poses(poses)
        r, Jc, Jp, ok = _batch(R, t, ci, points[pi], problem.uv, cam)
        r, Jc, Jp = r / sig, Jc / sig[:, :, None], Jp / sig[:, :, None]
        e2 = (r * r).sum(axis=1)
        c, w = _robust(e2, cfg.huber_delta)
        w = np.where(ok, w, 0.0)
        return 0.5 * float(c[ok].sum()), r, Jc, Jp, w

    poses, points = list(problem.poses), problem.points.copy()
    cost, r, Jc, Jp, w = evaluate(poses, points)
    result = LMResult(cost, cost, 0, False, [cost])
    lam = cfg.initial_lambda
    if cost <= cfg.abs_tolerance or (nfc == 0 and nfp == 0):
        result.converged = True
        return result

    for it in range(cfg.max_iters):
        result.iterations = it + 1
        wr = (w[:, None] * r)[:, :, None]
        # gradient g = J^T W r and Gauss-Newton blocks
        JcT = Jc.transpose(0, 2, 1)
        JpT = Jp.transpose(0, 2, 1)
        mc, mp = oc >= 0, op >= 0
        gc = _accumulate(oc[mc], (JcT[mc] @ wr[mc])[:, :, 0], nfc)
        gp = _accumulate(op[mp], (JpT[mp] @ wr[mp])[:, :, 0], nfp)
        wJc = w[:, None, None] * Jc
        wJp = w[:, None, None] * Jp
        A = _accumulate(oc[mc], JcT[mc] @ wJc[mc], nfc)
        V = _accumulate(op[mp], JpT[mp] @ wJp[mp], nfp)
        W = JcT @ wJp  # per observation (6, 3)
        # dense camera-point coupling, rows 6*cam+i, cols 3*pt+j
        rows = (6 * oc[sel])[:, None, None] + np.arange(6)[None, :, None] + np.zeros((1, 1, 3), int)
        cols = (3 * op[sel])[:, None, None] + np.arange(3)[None, None, :] + np.zeros((1, 6, 1), int)
        Wsp = np.zeros((6 * nfc, 3 * nfp))
        Wsp[rows, cols] = W[sel]

        while True:
            Ad = A.copy()
            Vd = V.copy()
            idx6 = np.arange(6)
            idx3 = np.arange(3)
            Ad[:, idx6, idx6] *= 1.0 + lam
            Ad[:, idx6, idx6] += 1e-12
            Vd[:, idx3, idx3] *= 1.0 + lam
            Vd[:, idx3, idx3] += 1e-12
            try:
                Vinv = np.linalg.inv(Vd) if nfp else np.zeros((0, 3, 3))
                if nfc:
                    Y = W[sel] @ Vinv[op[sel]]  # (6,3) per obs
                    Ysp = np.zeros((6 * nfc, 3 * nfp))
                    Ysp[rows, cols] = Y
                    S = np.zeros((nfc, 6, nfc, 6))
                    S[np.arange(nfc), :, np.arange(nfc), :] = Ad
                    Sm = S.reshape(6 * nfc, 6 * nfc)
                    if len(sel):
                        Sm -= Ysp @ Wsp.T
                    rhs = -gc.reshape(-1)
                    if len(sel):
                        rhs = rhs + Ysp @ gp.reshape(-1)
                    dc = cho_solve(cho_factor(Sm), rhs).reshape(nfc, 6)
                else:
                    dc = np.zeros((0, 6))
                if nfp:
                    back = -gp.copy()
                    if len(sel):
                        back -= (Wsp.T @ dc.reshape(-1)).reshape(nfp, 3)
                    dp = (Vinv @ back[:, :, None])[:, :, 0]
                else:
                    dp = np.zeros((0, 3))
                if not (np.all(np.isfinite(dc)) and np.all(np.isfinite(dp))):
                    raise LinAlgError("non-finite step")
            except (LinAlgError, np.linalg.LinAlgError):
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    raise SingularSystem("damped normal equations unsolvable at the lambda ceiling") from None
                continue

            new_poses = list(poses)
            for k, c in enumerate(free_c):
                new_poses[c] = poses[c].retract(dc[k])
            new_points = points.copy()
            new_points[free_p] += dp
            new_cost, nr, nJc, nJp, nw = evaluate(new_poses, new_points)
            if new_cost < cost:
                decrease = cost - new_cost
                poses, points = new_poses, new_points
                prev = cost
                cost, r, Jc, Jp, w = new_cost, nr, nJc, nJp, nw
                result.history.append(cost)
                lam = max(lam * cfg.lambda_down, 1e-15)
                if decrease <= cfg.cost_tolerance * prev or cost <= cfg.abs_tolerance:
                    result.converged = True
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                # no descent direction left at the ceiling: we are at a minimum
                result.converged = True
                break
        if result.converged:
            break

    for c in free_c:
        problem.poses[c] = poses[c]
    problem.points[free_p] = points[free_p]
    result.final_cost = cost
    return result


# ---------------------------------------------------------------------------
# pose only


def optimize_pose_only(pose: PoseSE3, points, uv, cam: CameraIntrinsics, cfg: LMConfig | None = None,
                       chi2: float = CHI2_2DOF, rounds: int = 2):
    """Refine one camera against fixed 3D points.

    Returns ``(pose, inlier_mask)``. After each round, observations whose
    squared pixel error exceeds ``chi2`` are labeled outliers and the next
    round runs without them.
    """
    cfg = cfg or LMConfig(max_iters=20)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    n = len(points)
    if n < 6:
        raise TooFewMatches(f"pose-only optimization needs 6 associations, got {n}")
    inl = np.ones(n, dtype=bool)
    for _ in range(rounds):
        idx = np.flatnonzero(inl)
        if len(idx) < 6:
            break
        prob = ReprojectionProblem(cam, [pose], points[idx], np.zeros(len(idx), int), np.arange(len(idx)),
                                   uv[idx], fixed_points=np.ones(len(idx), bool))
        solve_lm(prob, cfg)
        pose = prob.poses[0]
        full = ReprojectionProblem(cam, [pose], points, np.zeros(n, int), np.arange(n), uv)
        e = reprojection_errors(full)
        new_inl = e * e <= chi2
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    return pose, inl


# ---------------------------------------------------------------------------
# similarity from point pairs


def solve_sim3(a, b, with_scale: bool = True) -> Sim3:
    """Closed-form least-squares ``b ~ s R a + t`` (Umeyama)."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) != len(b):
        raise ValueError("point sets differ in size")
    if len(a) < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {len(a)}")
    # canonical order makes the result independent of the input permutation
    order = np.lexsort(np.hstack([a, b]).T[::-1])
    a, b = a[order], b[order]
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    ac, bc = a - ma, b - mb
    sa = np.linalg.svd(ac, compute_uv=False)
    if sa[0] <= 1e-12 or sa[1] <= 1e-9 * sa[0]:
        raise DegenerateConfiguration("points are coincident or collinear")
    n = len(a)
    C = bc.T @ ac / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_a = float((ac * ac).sum()) / n
    s = float(np.trace(np.diag(D) @ S) / var_a) if with_scale else 1.0
    t = mb - s * R @ ma
    return Sim3(R, t, s)


# ---------------------------------------------------------------------------
# pose graph


@dataclass
class PoseGraphEdge:
    i: int
    j: int
    measurement: Sim3  # expected S_j * S_i^-1 (camera i frame -> camera j frame)
    weight: float = 1.0


def _edge_residual(Si: Sim3, Sj: Sim3, meas: Sim3):
    return meas.compose(Si).compose(Sj.inverse()).log()


def optimize_pose_graph(poses: dict, edges, fixed=(), cfg: LMConfig | None = None, step: float = 1e-6):
    """Minimize the summed squared Sim3 log residuals of all edges.

    ``poses`` maps node id -> world-to-camera ``Sim3``. Returns a new dict.
    """
    cfg = cfg or LMConfig(max_iters=30, huber_delta=None, initial_lambda=1e-6)
    ids = sorted(poses)
    if not ids:
        return {}
    fixed = set(fixed) or {ids[0]}
    edges = list(edges)
    adj = {k: set() for k in ids}
    for e in edges:
        if e.i not in adj or e.j not in adj:
            raise KeyError(f"edge {e.i}-{e.j} references an unknown node")
        adj[e.i].add(e.j)
        adj[e.j].add(e.i)
    seen, queue = {ids[0]}, deque([ids[0]])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(ids):
        raise DegenerateConfiguration(f"pose graph is disconnected ({len(ids) - len(seen)} unreachable nodes)")

    free = [k for k in ids if k not in fixed]
    col = {k: n for n, k in enumerate(free)}
    cur = dict(poses)

    def total(state):
        c = 0.0
        for e in edges:
            r = _edge_residual(state[e.i], state[e.j], e.measurement)
            c += e.weight * float(r @ r)
        return 0.5 * c

    def jac(state, e):
        r0 = _edge_residual(state[e.i], state[e.j], e.measurement)
        out = {}
        for node in (e.i, e.j):
            if node not in col:
                continue
            J = np.empty((7, 7))
            for k in range(7):
                d = np.zeros(7)
                d[k] = step
                sp = dict(state)
                sp[node] = state[node].retract(d)
                rp = _edge_residual(sp[e.i], sp[e.j], e.measurement)
                sp[node] = state[node].retract(-d)
                rm = _edge_residual(sp[e.i], sp[e.j], e.measurement)
                J[:, k] = (rp - rm) / (2 * step)
            out[node] = J
        return r0, out

    cost = total(cur)
    lam = cfg.initial_lambda
    n = 7 * len(free)
    if n == 0 or cost <= cfg.abs_tolerance:
        return cur
    for _ in range(cfg.max_iters):
        H = np.zeros((n, n))
        g = np.zeros(n)
        for e in edges:
            r, Js = jac(cur, e)
            for a, Ja in Js.items():
                ia = 7 * col[a]
                g[ia : ia + 7] += e.weight * Ja.T @ r
                for b, Jb in Js.items():
                    ib = 7 * col[b]
                    H[ia : ia + 7, ib : ib + 7] += e.weight * Ja.T @ Jb
        done = False
        while True:
            Hd = H.copy()
            Hd[np.diag_indices(n)] *= 1.0 + lam
            Hd[np.diag_indices(n)] += 1e-12
            try:
                dx = cho_solve(cho_factor(Hd), -g)
            except LinAlgError:
                lam *= cfg.lambda_up
                if lam > cfg.lambda_max:
                    raise SingularSystem("pose graph normal equations unsolvable") from None
                continue
            trial = dict(cur)
            for k in free:
                trial[k] = cur[k].retract(dx[7 * col[k] : 7 * col[k] + 7])
            new = total(trial)
            if new < cost:
                dec = cost - new
                prev = cost
                cur, cost = trial, new
                lam = max(lam * cfg.lambda_down, 1e-15)
                done = dec <= cfg.cost_tolerance * prev or cost <= cfg.abs_tolerance
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                done = True
                break
        if done:
            break
    return cur
