import math
import re

import numpy as np
import pytest

from liftslam.errors import MalformedFile, NoOverlap
from liftslam.evaluation import (
    KITTI_LENGTHS,
    FixedDelta,
    LengthBased,
    Trajectory,
    align_sim3,
    associate,
    ate,
    emit_report,
    evaluate,
    read_kitti,
    read_metrics,
    read_trajectory,
    read_tum,
    rpe,
    write_kitti,
    write_tum,
)
from liftslam.geometry import PoseSE3, Sim3, so3_exp
from trajs import lateral_drift, rotation_drift, straight_line, wiggly


def test_associate_identical():
    gt = wiggly(20)
    ie, ig = associate(gt, gt)
    assert ie.tolist() == ig.tolist() == list(range(20))


def test_associate_disjoint():
    gt = wiggly(20)
    later = Trajectory(gt.timestamps + 100.0, gt.poses)
    with pytest.raises(NoOverlap):
        associate(later, gt)


def test_associate_offset():
    gt = wiggly(20)
    shifted = Trajectory(gt.timestamps + 0.01, gt.poses)
    ie, ig = associate(shifted, gt, max_dt=0.02)
    assert ie.tolist() == ig.tolist() == list(range(20))


def test_align_scaled():
    gt = wiggly()
    est = gt.transformed(Sim3(np.eye(3), np.zeros(3), 0.5))
    S = align_sim3(est, gt)
    assert S.s == pytest.approx(2.0, abs=1e-12)
    assert ate(est, gt) < 1e-12


def test_align_identity():
    gt = wiggly()
    S = align_sim3(gt, gt)
    assert S.s == 1.0 and np.array_equal(S.R, np.eye(3)) and not S.t.any()


def test_align_random_similarity(rng):
    gt = wiggly()
    for _ in range(20):
        S = Sim3(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10, rng.uniform(0.2, 5))
        est = gt.transformed(S.inverse())
        R = align_sim3(est, gt)
        assert abs(R.s - S.s) < 1e-9
        assert np.abs(R.R - S.R).max() < 1e-9
        assert np.abs(R.t - S.t).max() < 1e-9


def test_ate_identical_zero():
    gt = wiggly()
    assert ate(gt, gt) == 0.0


def test_ate_shift_absorbed():
    gt = wiggly()
    est = Trajectory(gt.timestamps, [PoseSE3(p.R, p.t + [1, 0, 0]) for p in gt.poses])
    assert ate(est, gt) < 1e-12


def test_ate_single_outlier():
    gt = wiggly(50)
    poses = list(gt.poses)
    poses[17] = PoseSE3(poses[17].R, poses[17].t + [0, 3.0, 0])
    est = Trajectory(gt.timestamps, poses)
    assert ate(est, gt, alignment="none") == pytest.approx(3 / math.sqrt(50), abs=1e-12)


def test_rpe_identical_zero():
    gt = wiggly()
    r = rpe(gt, gt, FixedDelta(1))
    assert r.trans_pct == 0.0
    assert r.rot_deg_per_m < 1e-12


def test_rpe_translation_drift_every_length():
    gt, s = straight_line()
    est = lateral_drift(gt, s, 0.01)
    for ell in KITTI_LENGTHS:
        r = rpe(est, gt, LengthBased((ell,)))
        assert not r.fallback
        assert abs(r.trans_pct - 1.0) <= 0.05


def test_rpe_rotation_drift():
    gt, s = straight_line()
    est = rotation_drift(gt, s, 0.01)
    for ell in KITTI_LENGTHS:
        r = rpe(est, gt, LengthBased((ell,)))
        assert r.rot_deg_per_m == pytest.approx(0.01, rel=1e-6)


def test_rpe_fallback_short_path():
    gt = wiggly(20)
    r = rpe(gt, gt, LengthBased())
    assert r.fallback


def test_evaluate_identical():
    gt = wiggly()
    rep = evaluate(gt, gt)
    assert rep.ate_rmse == 0.0 and rep.rpe_trans == 0.0 and rep.rpe_rot < 1e-12


def test_tum_roundtrip(tmp_path):
    gt = wiggly()
    write_tum(tmp_path / "t.tum", gt)
    back = read_tum(tmp_path / "t.tum")
    assert np.array_equal(back.timestamps, gt.timestamps)
    for a, b in zip(back.poses, gt.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-15)


def test_kitti_roundtrip(tmp_path):
    gt = wiggly()
    write_kitti(tmp_path / "p.txt", gt)
    back = read_kitti(tmp_path / "p.txt", gt.timestamps)
    for a, b in zip(back.poses, gt.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)
    assert len(read_trajectory(tmp_path / "p.txt")) == len(gt)


def test_tum_bad_line(tmp_path):
    p = tmp_path / "bad.tum"
    p.write_text("0 0 0 0 0 0 0 1\n1 0 0\n")
    with pytest.raises(MalformedFile, match=":2:"):
        read_tum(p)


def test_report_roundtrip(tmp_path):
    gt = wiggly(60)
    est = Trajectory(gt.timestamps, [PoseSE3(p.R, p.t * 1.01) for p in gt.poses])
    rep = evaluate(est, gt, rpe_mode=FixedDelta(5))
    emit_report(rep, est, gt, tmp_path, plot=True)
    m = read_metrics(tmp_path / "metrics.csv")
    assert m["ate_rmse"] == rep.ate_rmse
    assert m["rpe_trans_pct"] == rep.rpe_trans
    assert m["rpe_rot_deg_per_m"] == rep.rpe_rot
    assert m["n_pairs"] == rep.n_pairs
    svg = (tmp_path / "trajectory.svg").read_text()
    assert len(re.findall(r"<polyline\b", svg)) == 2
    assert (tmp_path / "trajectory.png").stat().st_size > 0


def test_report_empty_writes_nothing(tmp_path):
    empty = Trajectory([], [])
    rep = evaluate(wiggly(), wiggly())
    with pytest.raises(ValueError):
        emit_report(rep, empty, empty, tmp_path / "out")
    assert not (tmp_path / "out").exists()
