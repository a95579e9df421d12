import numpy as np

from conftest import look_at
from liftslam.features import FeatureSet, landmark_codes
from liftslam.geometry import CameraIntrinsics, project_many
from liftslam.mapping import MappingConfig, bundle_adjust, fuse_duplicates, fuse_into, triangulate_new_points
from liftslam.mapstore import Frame, MapStore
from liftslam.optimization import LMConfig

CAM = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
N_SHARED = 20
N_NEW = 100


def _scene(seed=0, second_center=(0.6, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(-2, 2, N_SHARED + N_NEW), rng.uniform(-1.5, 1.5, N_SHARED + N_NEW),
                         rng.uniform(5, 8, N_SHARED + N_NEW)])
    poses = [look_at([0, 0, 0], [0, 0, 6]), look_at(second_center, [0, 0, 6])]
    codes = landmark_codes(len(X), 128, seed)
    return X, poses, codes


def _store(X, poses, codes, desc_b=None):
    """Two keyframes observing every landmark; the first ``N_SHARED`` are mapped."""
    store = MapStore()
    for k, pose in enumerate(poses):
        uv, _, ok = project_many(X, pose, CAM)
        assert ok.all() and CAM.in_image(uv).all()
        d = codes if (k == 0 or desc_b is None) else desc_b
        store.insert_keyframe(Frame(k, float(k), FeatureSet(uv, d.copy()), pose))
    for i in range(N_SHARED):
        store.add_map_point(X[i], {0: i, 1: i})
    return store


def test_no_neighbours():
    X, poses, codes = _scene()
    store = _store(X, poses, codes)
    assert triangulate_new_points(store, 0, [], CAM, 1.0) == []


def test_unmatched_features_triangulated():
    X, poses, codes = _scene()
    store = _store(X, poses, codes)
    new = triangulate_new_points(store, 1, [0], CAM, 1.0)
    assert len(new) == N_NEW
    for pid in new:
        i = store.points[pid].observations[1]
        assert np.linalg.norm(store.points[pid].position - X[i]) < 1e-6
    # a second pass finds nothing left to triangulate
    assert triangulate_new_points(store, 1, [0], CAM, 1.0) == []
    assert store.audit() == []


def test_reprojection_of_new_points():
    X, poses, codes = _scene(seed=3)
    store = _store(X, poses, codes)
    new = triangulate_new_points(store, 1, [0], CAM, 1.0)
    for pid in new:
        p = store.points[pid]
        for kid, idx in p.observations.items():
            kf = store.keyframes[kid]
            uv, _, _ = project_many(p.position[None], kf.pose, CAM)
            assert np.linalg.norm(uv[0] - kf.features.keypoints[idx]) < 1e-6


def test_zero_parallax_neighbour():
    X, poses, codes = _scene(second_center=(0.0, 0.0, 0.0))
    poses[1] = look_at([0, 0, 0], [0.3, 0, 6])  # pure rotation about the same center
    store = _store(X, poses, codes)
    assert triangulate_new_points(store, 1, [0], CAM, 1.0) == []


def test_wrong_association_rejected():
    X, poses, codes = _scene()
    uv, _, _ = project_many(X, poses[1], CAM)
    # pick two unmapped landmarks on clearly different image rows
    cand = np.arange(N_SHARED, len(X))
    a = cand[np.argmin(uv[cand, 1])]
    b = cand[np.argmax(uv[cand, 1])]
    assert uv[b, 1] - uv[a, 1] > 50
    swapped = codes.copy()
    swapped[[a, b]] = swapped[[b, a]]
    store = _store(X, poses, codes, desc_b=swapped)
    new = triangulate_new_points(store, 1, [0], CAM, 1.0, MappingConfig(epipolar_px=2.0))
    assert len(new) == N_NEW - 2
    for pid in new:
        obs = store.points[pid].observations
        assert obs[0] == obs[1]


def _fusion_store():
    X, poses, codes = _scene()
    store = MapStore()
    for k, pose in enumerate(poses):
        uv, _, _ = project_many(X, pose, CAM)
        store.insert_keyframe(Frame(k, float(k), FeatureSet(uv, codes.copy()), pose))
    # keyframe 0 maps the first half, keyframe 1 the second half
    for i in range(0, 50):
        store.add_map_point(X[i], {0: i})
    for i in range(50, 100):
        store.add_map_point(X[i], {1: i})
    store.add_map_point(X[7], {1: 7})  # the same landmark, mapped twice
    return store


def test_fuse_disjoint():
    X, poses, codes = _scene()
    store = MapStore()
    halves = [np.arange(0, 50), np.arange(50, 100)]
    for k, (pose, idx) in enumerate(zip(poses, halves)):
        uv, _, _ = project_many(X[idx], pose, CAM)
        store.insert_keyframe(Frame(k, float(k), FeatureSet(uv, codes[idx].copy()), pose))
        for j, i in enumerate(idx):
            store.add_map_point(X[i], {k: j})
    before = {pid: dict(p.observations) for pid, p in store.points.items()}
    assert fuse_duplicates(store, 1, [0], CAM, 1.0) == 0
    assert {pid: dict(p.observations) for pid, p in store.points.items()} == before
    assert store.audit() == []


def test_fuse_duplicate_point():
    store = _fusion_store()
    # restrict the candidates to the duplicated landmark
    dup = [pid for pid, p in store.points.items() if p.observations == {1: 7}][0]
    orig = [pid for pid, p in store.points.items() if p.observations == {0: 7}][0]
    n_before = len(store.points)
    assert fuse_into(store, 0, [dup], CAM, 1.0) == 1
    assert len(store.points) == n_before - 1
    survivor = orig if orig in store.points else dup
    assert store.points[survivor].observations == {0: 7, 1: 7}
    assert store.audit() == []


def test_local_bundle_adjust_restores_reprojection():
    X, poses, codes = _scene(seed=5)
    store = _store(X, poses, codes)
    new = triangulate_new_points(store, 1, [0], CAM, 1.0)
    rng = np.random.default_rng(0)
    for pid in new:
        store.set_point_position(pid, store.points[pid].position + rng.normal(size=3) * 0.01)
    initial, final, pruned = bundle_adjust(store, CAM, free_kfs=[1], fixed_kfs=[0], cfg=LMConfig(max_iters=50))
    assert final < initial and pruned == 0
    for pid in store.points:
        p = store.points[pid]
        for kid, idx in p.observations.items():
            uv, _, _ = project_many(p.position[None], store.keyframes[kid].pose, CAM)
            assert np.linalg.norm(uv[0] - store.keyframes[kid].features.keypoints[idx]) < 1e-6
