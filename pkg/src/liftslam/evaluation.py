"""Trajectory metrics: alignment, ATE, RPE (fixed delta and KITTI lengths),
trajectory file formats and report emission.

Trajectories hold camera-to-world poses, as stored in TUM and KITTI files.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedFile, NoOverlap
from .geometry import PoseSE3, Sim3, matrix_to_quat, quat_mul, quat_to_matrix
from .optimization import solve_sim3

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list  # camera-to-world PoseSE3

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def transformed(self, S: Sim3) -> "Trajectory":
        """Apply a world similarity: positions map through ``S``, orientations rotate."""
        if S.s == 1.0 and not S.t.any() and np.array_equal(S.R, np.eye(3)):
            return Trajectory(self.timestamps.copy(), list(self.poses))
        out = []
        for p in self.poses:
            out.append(PoseSE3(S.R @ p.R, S.act(p.t[None])[0]))
        return Trajectory(self.timestamps.copy(), out)

    @classmethod
    def from_world_to_camera(cls, timestamps, poses):
        return cls(timestamps, [p.inverse() for p in poses])


def path_lengths(traj: Trajectory):
    d = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(d)])


# ---------------------------------------------------------------------------
# association and alignment


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairing; returns ``(est_idx, gt_idx)`` arrays."""
    if len(est) == 0 or len(gt) == 0:
        raise NoOverlap("empty trajectory")
    te, tg = est.timestamps, gt.timestamps
    cand = []
    for i, t in enumerate(te):
        j = int(np.searchsorted(tg, t))
        for jj in (j - 1, j, j + 1):
            if 0 <= jj < len(tg) and abs(tg[jj] - t) <= max_dt:
                cand.append((abs(tg[jj] - t), i, jj))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    if not pairs:
        raise NoOverlap(f"no timestamps within {max_dt} s")
    pairs.sort()
    a = np.array(pairs)
    return a[:, 0], a[:, 1]


def paired(est: Trajectory, gt: Trajectory, max_dt: float = 0.02):
    ie, ig = associate(est, gt, max_dt)
    return (Trajectory(est.timestamps[ie], [est.poses[i] for i in ie]),
            Trajectory(gt.timestamps[ig], [gt.poses[i] for i in ig]))


def align_sim3(est: Trajectory, gt: Trajectory, with_scale: bool = True) -> Sim3:
    """Similarity mapping estimated positions onto ground truth (paired samples)."""
    if np.array_equal(est.positions, gt.positions):
        return Sim3.identity()  # exact solution; the SVD path would add roundoff
    return solve_sim3(est.positions, gt.positions, with_scale=with_scale)


def align(est: Trajectory, gt: Trajectory, mode: str = "sim3") -> tuple[Trajectory, Sim3]:
    if mode == "none":
        return est, Sim3.identity()
    S = align_sim3(est, gt, with_scale=(mode == "sim3"))
    return est.transformed(S), S


def ate(est: Trajectory, gt: Trajectory, alignment: str = "sim3") -> float:
    """Translational RMSE after alignment (``sim3``, ``se3`` or ``none``); inputs paired."""
    e, _ = align(est, gt, alignment)
    d = e.positions - gt.positions
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# ---------------------------------------------------------------------------
# relative pose error


@dataclass(frozen=True)
class FixedDelta:
    delta: int = 1


@dataclass(frozen=True)
class LengthBased:
    lengths: tuple = KITTI_LENGTHS
    step: int = 1


@dataclass
class RPEResult:
    trans_pct: float
    rot_deg_per_m: float
    trans_errors: np.ndarray
    rot_errors: np.ndarray
    mode: object
    fallback: bool = False


def _rel(a: PoseSE3, b: PoseSE3):
    """Motion ``a^-1 b`` as (quaternion, translation), written so that equal
    inputs give bit-identical outputs."""
    conj = a.quat * np.array([1.0, -1.0, -1.0, -1.0])
    return quat_mul(conj, b.quat), a.R.T @ (b.t - a.t)


def _pair_error(est, gt, i, j):
    qg, tg = _rel(gt.poses[i], gt.poses[j])
    qe, te = _rel(est.poses[i], est.poses[j])
    qE = quat_mul(qg * np.array([1.0, -1.0, -1.0, -1.0]), qe)
    t_err = float(np.linalg.norm(quat_to_matrix(qg).T @ (te - tg)))
    r_err = 2.0 * math.atan2(float(np.linalg.norm(qE[1:])), abs(float(qE[0])))
    return t_err, r_err


def rpe(est: Trajectory, gt: Trajectory, mode=FixedDelta(1)) -> RPEResult:
    """Relative pose error on paired samples, as (trans %, rot deg/m)."""
    if len(est) != len(gt):
        raise ValueError("rpe expects paired trajectories")
    dist = path_lengths(gt)
    te, re = [], []
    if isinstance(mode, LengthBased):
        for i in range(0, len(gt), max(1, mode.step)):
            for ell in mode.lengths:
                if dist[-1] - dist[i] < ell:
                    continue
                j = i + int(np.argmin(np.abs(dist[i:] - dist[i] - ell)))
                t, r = _pair_error(est, gt, i, j)
                te.append(t / ell)
                re.append(r / ell)
        if not te:
            res = rpe(est, gt, FixedDelta(1))
            res.fallback = True
            return res
    else:
        for i in range(len(gt) - mode.delta):
            j = i + mode.delta
            seg = dist[j] - dist[i]
            if seg <= 0:
                continue
            t, r = _pair_error(est, gt, i, j)
            te.append(t / seg)
            re.append(r / seg)
    te, re = np.array(te), np.array(re)
    if len(te) == 0:
        return RPEResult(0.0, 0.0, te, re, mode)
    return RPEResult(float(te.mean() * 100.0), float(np.degrees(re.mean())), te, re, mode)


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_trans: float
    rpe_rot: float
    n_pairs: int
    alignment: str = "sim3"
    rpe_mode: str = "delta1"
    rpe_fallback: bool = False
    scale: float = 1.0
    extra: dict = field(default_factory=dict)

    def rows(self):
        rows = [("ate_rmse", self.ate_rmse), ("rpe_trans_pct", self.rpe_trans), ("rpe_rot_deg_per_m", self.rpe_rot),
                ("n_pairs", self.n_pairs), ("alignment_scale", self.scale), ("rpe_fallback", int(self.rpe_fallback))]
        rows += sorted(self.extra.items())
        return rows


def evaluate(est: Trajectory, gt: Trajectory, alignment="sim3", rpe_mode=None, max_dt=0.02) -> MetricReport:
    """Associate, align, and compute ATE plus RPE on the aligned estimate."""
    e, g = paired(est, gt, max_dt)
    aligned, S = align(e, g, alignment)
    d = aligned.positions - g.positions
    ate_v = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    mode = rpe_mode or LengthBased()
    r = rpe(aligned, g, mode)
    name = f"delta{r.mode.delta}" if isinstance(r.mode, FixedDelta) else "kitti_lengths"
    return MetricReport(ate_v, r.trans_pct, r.rot_deg_per_m, len(e), alignment, name, r.fallback, S.s)


# ---------------------------------------------------------------------------
# file formats


def write_tum(path, traj: Trajectory):
    lines = []
    for t, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.quat
        lines.append(" ".join(repr(float(v)) for v in (t, *p.t, x, y, z, w)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> Trajectory:
    path = Path(path)
    ts, poses = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.replace(",", " ").split()
        if len(tok) != 8:
            raise MalformedFile(f"{path}:{lineno}: expected 8 values, found {len(tok)}")
        try:
            v = [float(x) for x in tok]
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
        q = np.array([v[7], v[4], v[5], v[6]])
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise MalformedFile(f"{path}:{lineno}: quaternion norm {np.linalg.norm(q):.6f} is not 1")
        ts.append(v[0])
        poses.append(PoseSE3(quat=q, translation=v[1:4]))
    try:
        return Trajectory(ts, poses)
    except ValueError as exc:
        raise MalformedFile(f"{path}: {exc}") from None


def write_kitti(path, traj: Trajectory):
    lines = [" ".join(repr(float(v)) for v in np.hstack([p.R, p.t[:, None]]).ravel()) for p in traj.poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_kitti(path, timestamps=None, ortho_tol: float = 1e-6) -> Trajectory:
    path = Path(path)
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 12:
            raise MalformedFile(f"{path}:{lineno}: expected 12 values, found {len(tok)}")
        try:
            M = np.array([float(x) for x in tok]).reshape(3, 4)
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
        R = M[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > ortho_tol or np.linalg.det(R) <= 0:
            # KITTI files print 9 digits, re-orthonormalize within tolerance only
            U, _, Vt = np.linalg.svd(R)
            Rn = U @ Vt
            if np.abs(Rn - R).max() > 1e-4 or np.linalg.det(Rn) <= 0:
                raise MalformedFile(f"{path}:{lineno}: rotation is not orthonormal")
            R = Rn
        poses.append(PoseSE3(R, M[:, 3]))
    ts = np.arange(len(poses), dtype=float) if timestamps is None else np.asarray(timestamps, dtype=float)
    if len(ts) != len(poses):
        raise MalformedFile(f"{path}: {len(poses)} poses but {len(ts)} timestamps")
    return Trajectory(ts, poses)


def read_trajectory(path) -> Trajectory:
    """TUM (8 columns) or KITTI (12 columns), detected from the first data line."""
    path = Path(path)
    for line in path.read_text().splitlines():
        s = line.strip()
        if s and not s.startswith("#"):
            n = len(s.replace(",", " ").split())
            return read_kitti(path) if n == 12 else read_tum(path)
    raise MalformedFile(f"{path}: no trajectory samples")


# ---------------------------------------------------------------------------
# report emission


def _svg(est_xy, gt_xy, size=480, margin=30):
    both = np.vstack([est_xy, gt_xy])
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = max(float((hi - lo).max()), 1e-12)
    k = (size - 2 * margin) / span

    def pts(xy):
        return " ".join(f"{margin + (x - lo[0]) * k:.3f},{size - margin - (y - lo[1]) * k:.3f}" for x, y in xy)

    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        f'<polyline id="gt" fill="none" stroke="#444444" stroke-width="1.5" stroke-dasharray="5,3" points="{pts(gt_xy)}"/>\n'
        f'<polyline id="est" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{pts(est_xy)}"/>\n'
        f'<g font-family="sans-serif" font-size="12">'
        f'<text x="{size - 120}" y="20" fill="#444444">ground truth</text>'
        f'<text x="{size - 120}" y="36" fill="#1f77b4">estimate</text></g>\n'
        "</svg>\n"
    )


def emit_report(report: MetricReport, est: Trajectory, gt: Trajectory, out_dir, plot: bool = True):
    """Write metrics.csv, trajectory_xy.csv and trajectory.svg (plus a PNG figure).

    ``est`` and ``gt`` must be paired; the estimate is aligned before plotting.
    Nothing is written if any content fails to render.
    """
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("cannot report on an empty trajectory")
    aligned, _ = align(est, gt, report.alignment) if len(est) >= 3 else (est, None)
    e_xy, g_xy = aligned.positions[:, :2], gt.positions[:, :2]
    m = io.StringIO()
    w = csv.writer(m, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in report.rows():
        w.writerow([k, repr(float(v)) if isinstance(v, float) else v])
    xy = io.StringIO()
    w = csv.writer(xy, lineterminator="\n")
    w.writerow(["timestamp", "est_x", "est_y", "gt_x", "gt_y"])
    for t, a, b in zip(gt.timestamps, e_xy, g_xy):
        w.writerow([repr(float(t)), repr(float(a[0])), repr(float(a[1])), repr(float(b[0])), repr(float(b[1]))])
    files = {"metrics.csv": m.getvalue(), "trajectory_xy.csv": xy.getvalue(), "trajectory.svg": _svg(e_xy, g_xy)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, out / name)
        written.append(out / name)
    if plot:
        from .plotting import plot_trajectory

        written.append(plot_trajectory(e_xy, g_xy, out / "trajectory.png", title=f"ATE {report.ate_rmse:.4g}"))
    return written


def read_metrics(path) -> dict:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return {k: float(v) for k, v in r}
