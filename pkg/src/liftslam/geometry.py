"""Camera model, rigid/similarity transforms, projection and two-view geometry.

Poses map world coordinates into the camera frame: ``x_cam = R @ x_world + t``.
Rotations are stored as unit quaternions ``(w, x, y, z)`` and exposed as
matrices; every composition renormalizes the quaternion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InitFailure, MalformedCalib

PARALLAX_MIN = math.radians(1.0)
DEPTH_EPS = 1e-6


# ---------------------------------------------------------------------------
# rotations


def hat(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; result has w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def _normalize_quat(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def so3_exp(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + (math.sin(theta) / theta) * W + ((1 - math.cos(theta)) / theta**2) * W @ W


def quat_exp(w):
    w = np.asarray(w, dtype=float)
    theta = math.sqrt(float(w @ w))
    if theta < 1e-12:
        return _normalize_quat([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
    axis = w / theta
    return _normalize_quat(np.concatenate([[math.cos(theta / 2)], math.sin(theta / 2) * axis]))


def quat_log(q):
    q = _normalize_quat(q)
    v = q[1:]
    n = math.sqrt(float(v @ v))
    if n < 1e-12:
        return 2.0 * v
    theta = 2.0 * math.atan2(n, q[0])
    return theta * v / n


def so3_log(R):
    return quat_log(matrix_to_quat(R))


def rotation_angle(R):
    return float(np.linalg.norm(so3_log(R)))


# ---------------------------------------------------------------------------
# transforms


class PoseSE3:
    """Rigid transform world -> camera."""

    __slots__ = ("_q", "_t", "_R")

    def __init__(self, rotation=None, translation=None, *, quat=None):
        if quat is not None:
            q = _normalize_quat(quat)
        elif rotation is not None:
            q = matrix_to_quat(rotation)
        else:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        self._q = q
        self._R = quat_to_matrix(q)
        self._t = np.zeros(3) if translation is None else np.array(translation, dtype=float).reshape(3)
        self._q.flags.writeable = False
        self._R.flags.writeable = False
        self._t.flags.writeable = False

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def R(self):
        return self._R

    @property
    def t(self):
        return self._t

    @property
    def quat(self):
        return self._q

    @property
    def center(self):
        return -self._R.T @ self._t

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self._t
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(quat=quat_mul(self._q, other._q), translation=self._R @ other._t + self._t)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        qc = self._q * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(quat=qc, translation=-self._R.T @ self._t)

    def act(self, points):
        p = np.asarray(points, dtype=float)
        return p @ self._R.T + self._t

    def retract(self, delta) -> "PoseSE3":
        """Left update ``(exp(w), rho) ∘ self`` with ``delta = (w, rho)``."""
        delta = np.asarray(delta, dtype=float)
        dq = quat_exp(delta[:3])
        dR = quat_to_matrix(dq)
        return PoseSE3(quat=quat_mul(dq, self._q), translation=dR @ self._t + delta[3:])

    def log(self):
        """Decoupled tangent ``(w, t)``; inverse of ``retract`` from identity."""
        return np.concatenate([quat_log(self._q), self._t])

    def __repr__(self):
        return f"PoseSE3(q={np.round(self._q, 6).tolist()}, t={np.round(self._t, 6).tolist()})"


class Sim3:
    """Similarity ``x -> s R x + t``."""

    __slots__ = ("_q", "_t", "_s", "_R")

    def __init__(self, rotation=None, translation=None, scale=1.0, *, quat=None):
        if scale <= 0 or not math.isfinite(scale):
            raise ValueError(f"scale must be positive, got {scale}")
        if quat is not None:
            q = _normalize_quat(quat)
        elif rotation is not None:
            q = matrix_to_quat(rotation)
        else:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        self._q = q
        self._R = quat_to_matrix(q)
        self._t = np.zeros(3) if translation is None else np.array(translation, dtype=float).reshape(3)
        self._s = float(scale)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_se3(cls, pose: PoseSE3, scale=1.0):
        return cls(quat=pose.quat, translation=pose.t, scale=scale)

    @property
    def R(self):
        return self._R

    @property
    def t(self):
        return self._t

    @property
    def s(self):
        return self._s

    @property
    def quat(self):
        return self._q

    def to_se3(self) -> PoseSE3:
        """Camera pose with the same center and orientation (scale dropped)."""
        return PoseSE3(quat=self._q, translation=self._t / self._s)

    def compose(self, other: "Sim3") -> "Sim3":
        return Sim3(
            quat=quat_mul(self._q, other._q),
            translation=self._s * (self._R @ other._t) + self._t,
            scale=self._s * other._s,
        )

    __matmul__ = compose

    def inverse(self) -> "Sim3":
        qc = self._q * np.array([1.0, -1.0, -1.0, -1.0])
        return Sim3(quat=qc, translation=-(self._R.T @ self._t) / self._s, scale=1.0 / self._s)

    def act(self, points):
        p = np.asarray(points, dtype=float)
        return self._s * (p @ self._R.T) + self._t

    def log(self):
        """Decoupled 7-vector ``(w, t, log s)``."""
        return np.concatenate([quat_log(self._q), self._t, [math.log(self._s)]])

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        return cls(quat=quat_exp(xi[:3]), translation=xi[3:6], scale=math.exp(xi[6]))

    def retract(self, delta) -> "Sim3":
        return Sim3.exp(delta).compose(self)

    def __repr__(self):
        return f"Sim3(s={self._s:.6g}, q={np.round(self._q, 6).tolist()}, t={np.round(self._t, 6).tolist()})"


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
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
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.linalg.inv(self.K)

    def in_image(self, uv, border=0.0):
        uv = np.asarray(uv, dtype=float)
        return (
            (uv[..., 0] >= border)
            & (uv[..., 0] < self.width - border)
            & (uv[..., 1] >= border)
            & (uv[..., 1] < self.height - border)
        )

    def normalize(self, uv):
        """Pixels -> normalized image coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)


def load_camera(path) -> CameraIntrinsics:
    """Read ``fx fy cx cy width height`` (one value per line, '#' comments)."""
    path = Path(path)
    values = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise MalformedCalib(f"{path}:{lineno}: expected a number, got {line!r}") from None
    if len(values) != 6:
        raise MalformedCalib(f"{path}: expected 6 values, found {len(values)}")
    fx, fy, cx, cy, w, h = values
    try:
        return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    except ValueError as exc:
        raise MalformedCalib(f"{path}: {exc}") from None


def save_camera(cam: CameraIntrinsics, path):
    Path(path).write_text(
        "# fx fy cx cy width height\n"
        + "\n".join(repr(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))
        + f"\n{cam.width}\n{cam.height}\n"
    )


# ---------------------------------------------------------------------------
# projection / triangulation


def project(point, pose: PoseSE3, cam: CameraIntrinsics, depth_eps=DEPTH_EPS):
    """Pixel coordinates of ``point``, or ``None`` when it is behind the camera."""
    X, Y, Z = pose.R @ np.asarray(point, dtype=float) + pose.t
    if Z <= depth_eps:
        return None
    return np.array([cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy])


def project_many(points, pose: PoseSE3, cam: CameraIntrinsics, depth_eps=DEPTH_EPS):
    """Vectorized projection; returns ``(uv, depth, valid)``."""
    pc = pose.act(points)
    z = pc[:, 2]
    valid = z > depth_eps
    zs = np.where(valid, z, 1.0)
    uv = np.stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    return uv, z, valid


def parallax_angle(p, c1, c2) -> float:
    """Angle between the rays ``c1 -> p`` and ``c2 -> p``."""
    a = np.asarray(c1, dtype=float) - np.asarray(p, dtype=float)
    b = np.asarray(c2, dtype=float) - np.asarray(p, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    # atan2 form stays accurate near 0 and pi
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def _dlt(x1n, x2n, P1, P2):
    A = np.stack(
        [
            x1n[0] * P1[2] - P1[0],
            x1n[1] * P1[2] - P1[1],
            x2n[0] * P2[2] - P2[0],
            x2n[1] * P2[2] - P2[1],
        ]
    )
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-15:
        return None
    return X[:3] / X[3]


def _refine_point(X, observations, iters=5):
    """Gauss-Newton on the reprojection residual of one point."""
    for _ in range(iters):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        for uv, pose, cam in observations:
            pc = pose.R @ X + pose.t
            z = pc[2]
            if z <= DEPTH_EPS:
                return X
            r = uv - np.array([cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy])
            dpi = np.array([[cam.fx / z, 0, -cam.fx * pc[0] / z**2], [0, cam.fy / z, -cam.fy * pc[1] / z**2]])
            J = dpi @ pose.R
            JtJ += J.T @ J
            Jtr += J.T @ r
        try:
            dx = np.linalg.solve(JtJ + 1e-12 * np.eye(3), Jtr)
        except np.linalg.LinAlgError:
            return X
        X = X + dx
        if np.linalg.norm(dx) < 1e-14 * max(1.0, np.linalg.norm(X)):
            break
    return X


def triangulate(obs1, obs2, pose1: PoseSE3, pose2: PoseSE3, cam: CameraIntrinsics,
                parallax_min=PARALLAX_MIN, depth_eps=DEPTH_EPS, baseline_eps=1e-9):
    """Linear triangulation polished on reprojection error; ``None`` if degenerate."""
    c1, c2 = pose1.center, pose2.center
    if np.linalg.norm(c1 - c2) <= baseline_eps:
        return None
    x1n = cam.normalize(obs1)
    x2n = cam.normalize(obs2)
    P1 = np.hstack([pose1.R, pose1.t[:, None]])
    P2 = np.hstack([pose2.R, pose2.t[:, None]])
    X = _dlt(x1n, x2n, P1, P2)
    if X is None or not np.all(np.isfinite(X)):
        return None
    X = _refine_point(X, [(np.asarray(obs1, float), pose1, cam), (np.asarray(obs2, float), pose2, cam)])
    if (pose1.R @ X + pose1.t)[2] <= depth_eps or (pose2.R @ X + pose2.t)[2] <= depth_eps:
        return None
    if parallax_angle(X, c1, c2) < parallax_min:
        return None
    return X


def triangulate_many(x1n, x2n, pose1: PoseSE3, pose2: PoseSE3):
    """Vectorized DLT on normalized coordinates (no refinement)."""
    P1 = np.hstack([pose1.R, pose1.t[:, None]])
    P2 = np.hstack([pose2.R, pose2.t[:, None]])
    A = np.stack(
        [
            x1n[:, 0, None] * P1[2] - P1[0],
            x1n[:, 1, None] * P1[2] - P1[1],
            x2n[:, 0, None] * P2[2] - P2[0],
            x2n[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    ok = np.abs(w) > 1e-15
    X = np.full((len(x1n), 3), np.nan)
    X[ok] = Xh[ok, :3] / w[ok, None]
    return X


# ---------------------------------------------------------------------------
# two-view initialization


@dataclass
class RansacConfig:
    iterations: int = 200
    threshold_px: float = 1.5
    min_inliers: int = 15
    parallax_min: float = PARALLAX_MIN
    seed: int = 0


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ T.T
    return ph, T


def eight_point(p1, p2):
    """Normalized 8-point fundamental matrix with rank-2 projection."""
    h1, T1 = _hartley(p1)
    h2, T2 = _hartley(p2)
    A = np.einsum("ni,nj->nij", h2, h1).reshape(len(p1), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    F = T2.T @ F @ T1
    n = np.linalg.norm(F)
    return F / n if n > 0 else F


def sampson_sq(F, p1, p2):
    h1 = np.hstack([p1, np.ones((len(p1), 1))])
    h2 = np.hstack([p2, np.ones((len(p2), 1))])
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.einsum("ni,ni->n", h2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def fundamental_from_poses(pose1: PoseSE3, pose2: PoseSE3, cam: CameraIntrinsics):
    """F with ``x2^T F x1 = 0`` for pixel coordinates."""
    rel = pose2.compose(pose1.inverse())
    E = hat(rel.t) @ rel.R
    Kinv = cam.K_inv
    return Kinv.T @ E @ Kinv


def decompose_essential(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def _check_pose(R, t, x1n, x2n, cam, thr_px, parallax_min):
    pose1 = PoseSE3.identity()
    pose2 = PoseSE3(R, t)
    X = triangulate_many(x1n, x2n, pose1, pose2)
    finite = np.all(np.isfinite(X), axis=1)
    Xs = np.where(finite[:, None], X, 0.0)
    z1 = Xs[:, 2]
    p2 = pose2.act(Xs)
    z2 = p2[:, 2]
    good = finite & (z1 > DEPTH_EPS) & (z2 > DEPTH_EPS)
    # reprojection in pixels
    f = 0.5 * (cam.fx + cam.fy)
    with np.errstate(divide="ignore", invalid="ignore"):
        e1 = np.linalg.norm(Xs[:, :2] / z1[:, None] - x1n, axis=1) * f
        e2 = np.linalg.norm(p2[:, :2] / z2[:, None] - x2n, axis=1) * f
    good &= (e1 < 2 * thr_px) & (e2 < 2 * thr_px)
    c2 = pose2.center
    a = -Xs
    b = c2[None, :] - Xs
    par = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ni,ni->n", a, b))
    return good, par, X


def estimate_two_view(pts1, pts2, cam: CameraIntrinsics, cfg: RansacConfig | None = None):
    """Relative pose of view 2 w.r.t. view 1 from pixel correspondences.

    Returns ``(pose, inlier_mask)`` with ``|t| = 1``. Raises ``InitFailure``.
    """
    cfg = cfg or RansacConfig()
    p1 = np.asarray(pts1, dtype=float).reshape(-1, 2)
    p2 = np.asarray(pts2, dtype=float).reshape(-1, 2)
    n = len(p1)
    if n < 8:
        raise InitFailure(f"need at least 8 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.threshold_px**2
    best_mask, best_count = None, -1
    for _ in range(cfg.iterations):
        idx = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(p1[idx], p2[idx])
        except np.linalg.LinAlgError:
            continue
        mask = sampson_sq(F, p1, p2) < thr2
        c = int(mask.sum())
        if c > best_count:
            best_count, best_mask = c, mask
            if c == n:
                break
    if best_mask is None or best_count < max(cfg.min_inliers, 8):
        raise InitFailure(f"too few epipolar inliers ({max(best_count, 0)})")
    # refit on all inliers, then re-classify once
    F = eight_point(p1[best_mask], p2[best_mask])
    mask = sampson_sq(F, p1, p2) < thr2
    if mask.sum() >= 8:
        F = eight_point(p1[mask], p2[mask])
    else:
        mask = best_mask
    if mask.sum() < cfg.min_inliers:
        raise InitFailure("too few inliers after refit")

    E = cam.K.T @ F @ cam.K
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    x1n = cam.normalize(p1[mask])
    x2n = cam.normalize(p2[mask])
    results = []
    for R, t in decompose_essential(E):
        good, par, _ = _check_pose(R, t, x1n, x2n, cam, cfg.threshold_px, cfg.parallax_min)
        results.append((int(good.sum()), R, t, good, par))
    results.sort(key=lambda r: -r[0])
    n_in = int(mask.sum())
    best = results[0]
    if best[0] < max(cfg.min_inliers, 0.9 * n_in):
        raise InitFailure(f"cheirality: only {best[0]} of {n_in} points in front of both views")
    if results[1][0] > 0.7 * best[0]:
        raise InitFailure("ambiguous pose decomposition")
    median_par = float(np.median(best[4][best[3]]))
    if median_par < cfg.parallax_min:
        raise InitFailure(f"insufficient parallax ({math.degrees(median_par):.3f} deg)")
    R, t = best[1], best[2]
    pose = PoseSE3(R, t / np.linalg.norm(t))
    full = np.zeros(n, dtype=bool)
    full[np.flatnonzero(mask)[best[3]]] = True
    return pose, full
