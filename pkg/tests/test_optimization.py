import numpy as np
import pytest

from conftest import random_pose
from liftslam.errors import DegenerateConfiguration, TooFewMatches
from liftslam.geometry import PoseSE3, Sim3, project, project_many, so3_exp
from liftslam.losses import relative_error
from liftslam.optimization import (
    LMConfig,
    PoseGraphEdge,
    ReprojectionProblem,
    optimize_pose_graph,
    optimize_pose_only,
    problem_cost,
    reprojection_errors,
    residual_and_jacobian,
    solve_lm,
    solve_sim3,
)
from synth_ba import CAM, ba_scene, perturbed_problem


def test_perfect_observation_zero_residual(rng):
    pose = random_pose(rng, 0.1, 0.2)
    X = pose.inverse().act(np.array([[0.3, -0.2, 6.0]]))[0]
    r, _, _ = residual_and_jacobian(pose, X, project(X, pose, CAM), CAM)
    assert np.allclose(r, 0, atol=1e-9)


def test_jacobians_finite_differences(rng):
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        pose = random_pose(rng, 0.3, 0.5)
        X = pose.inverse().act(rng.uniform([-2, -2, 3], [2, 2, 9], (1, 3)))[0]
        uv = rng.uniform(0, 500, 2)
        r, Jc, Jp = residual_and_jacobian(pose, X, uv, CAM)
        Nc = np.zeros((2, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            Nc[:, k] = (residual_and_jacobian(pose.retract(d), X, uv, CAM)[0]
                        - residual_and_jacobian(pose.retract(-d), X, uv, CAM)[0]) / (2 * h)
        Np = np.zeros((2, 3))
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            Np[:, k] = (residual_and_jacobian(pose, X + d, uv, CAM)[0]
                        - residual_and_jacobian(pose, X - d, uv, CAM)[0]) / (2 * h)
        worst = max(worst, relative_error(Jc, Nc), relative_error(Jp, Np))
    assert worst < 1e-5


def test_behind_camera_has_no_residual():
    assert residual_and_jacobian(PoseSE3.identity(), [0, 0, -1.0], [0, 0], CAM) is None


def test_fixed_points_untouched():
    prob, _, _ = perturbed_problem(6, 60)
    prob.fixed_points[:] = True
    before = prob.points.copy()
    solve_lm(prob, LMConfig(max_iters=5))
    assert np.array_equal(prob.points, before)


def test_fixed_poses_untouched():
    prob, truth, _ = perturbed_problem(6, 60)
    solve_lm(prob, LMConfig(max_iters=5))
    assert prob.poses[0] is truth[0] and prob.poses[1] is truth[1]


def test_optimal_problem_stays():
    poses, X, ci, pi, uv = ba_scene(6, 80)
    prob = ReprojectionProblem(CAM, poses, X, ci, pi, uv, fixed_poses=[True] + [False] * 5)
    c0 = problem_cost(prob)
    res = solve_lm(prob)
    assert res.iterations <= 1
    assert abs(res.final_cost - c0) <= 1e-12


def test_noiseless_ba_converges():
    prob, _, _ = perturbed_problem(12, 200)
    res = solve_lm(prob, LMConfig(max_iters=100))
    assert reprojection_errors(prob).mean() < 1e-6
    assert all(b < a for a, b in zip(res.history, res.history[1:]))


def test_noisy_ba_residual_matches_sigma():
    sigma = 1.0
    prob, _, _ = perturbed_problem(20, 500, pixel_sigma=sigma)
    solve_lm(prob, LMConfig(max_iters=100))
    res = []
    for c, p, uv in zip(prob.cam_idx, prob.pt_idx, prob.uv):
        res.append(uv - project(prob.points[p], prob.poses[c], CAM))
    rms = float(np.sqrt(np.mean(np.square(res))))  # per pixel coordinate
    assert abs(rms - sigma) <= 0.1 * sigma


def _pose_only_data(rng, n=100):
    pose = PoseSE3(so3_exp([0.05, -0.02, 0.01]), [0.1, -0.2, 0.3])
    X = pose.inverse().act(rng.uniform([-3, -2, 4], [3, 2, 10], (n, 3)))
    uv, _, _ = project_many(X, pose, CAM)
    return pose, X, uv


def test_pose_only_perfect(rng):
    pose, X, uv = _pose_only_data(rng)
    est, inl = optimize_pose_only(pose, X, uv, CAM)
    assert inl.all()
    assert np.allclose(est.matrix(), pose.matrix(), atol=1e-9)


def test_pose_only_flags_wrong_associations(rng):
    pose, X, uv = _pose_only_data(rng)
    wrong = rng.choice(len(X), 20, replace=False)
    uv = uv.copy()
    uv[wrong] = uv[rng.permutation(wrong)] + rng.uniform(30, 60, (20, 2)) * rng.choice([-1, 1], (20, 2))
    start = pose.retract([0.01, 0, 0, 0.05, 0, 0])
    est, inl = optimize_pose_only(start, X, uv, CAM)
    assert set(np.flatnonzero(~inl)) == set(wrong)
    assert np.allclose(est.matrix(), pose.matrix(), atol=1e-6)


def test_pose_only_too_few(rng):
    pose, X, uv = _pose_only_data(rng, 5)
    with pytest.raises(TooFewMatches):
        optimize_pose_only(pose, X, uv, CAM)


def test_sim3_known_transform(rng):
    S = Sim3(so3_exp([0, 0, np.pi / 2]), [1, 0, 0], 2.0)
    a = rng.normal(size=(30, 3))
    est = solve_sim3(a, S.act(a))
    assert abs(est.s - 2.0) < 1e-9
    assert np.allclose(est.R, S.R, atol=1e-9)
    assert np.allclose(est.t, S.t, atol=1e-9)


def test_sim3_identity(rng):
    a = rng.normal(size=(10, 3))
    est = solve_sim3(a, a)
    assert abs(est.s - 1) < 1e-12 and np.allclose(est.R, np.eye(3), atol=1e-12) and np.allclose(est.t, 0, atol=1e-12)


def test_sim3_two_pairs():
    with pytest.raises(DegenerateConfiguration):
        solve_sim3(np.zeros((2, 3)), np.ones((2, 3)))


def _ring(n=24, radius=5.0):
    out = {}
    for k in range(n):
        th = 2 * np.pi * k / n
        R = so3_exp([0, th, 0])
        c = np.array([radius * np.cos(th), 0.0, radius * np.sin(th)])
        out[k] = Sim3.from_se3(PoseSE3(R, -R @ c))
    return out


def _edge(poses, i, j, drift=None):
    m = poses[j].compose(poses[i].inverse())
    if drift is not None:
        m = drift.compose(m)
    return PoseGraphEdge(i, j, m)


def test_pose_graph_consistent_unchanged():
    poses = _ring()
    n = len(poses)
    edges = [_edge(poses, k, k + 1) for k in range(n - 1)] + [_edge(poses, n - 1, 0)]
    out = optimize_pose_graph(poses, edges)
    for k in poses:
        assert np.allclose(out[k].act(np.eye(3)), poses[k].act(np.eye(3)), atol=1e-9)


def test_pose_graph_drift_reduced():
    truth = _ring()
    n = len(truth)
    drift = Sim3(so3_exp([0, 0.004, 0]), [0.02, 0, 0.01], 1.0)
    odo = [_edge(truth, k, k + 1, drift) for k in range(n - 1)]
    start = {0: truth[0]}
    for e in odo:
        start[e.j] = e.measurement.compose(start[e.i])
    loop = _edge(truth, n - 1, 0)
    out = optimize_pose_graph(start, odo + [loop])

    def endpoint_err(p):
        return np.linalg.norm(p[n - 1].inverse().t - truth[n - 1].inverse().t)

    before, after = endpoint_err(start), endpoint_err(out)
    assert before > 0.1
    assert after <= 0.1 * before


def test_pose_graph_disconnected():
    poses = _ring(4)
    with pytest.raises(DegenerateConfiguration):
        optimize_pose_graph(poses, [_edge(poses, 0, 1), _edge(poses, 2, 3)])
