import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftslam.errors import DanglingKeyFrame, NoPose
from liftslam.mapstore import Frame, MapStore, StoreConfig
from workload import make_frame, random_workload


def _store_with(rng, n_kf, cfg=None):
    store = MapStore(cfg or StoreConfig())
    for i in range(n_kf):
        store.insert_keyframe(make_frame(rng, i))
    return store


def _share(store, kids, n, start=0):
    """Add ``n`` points observed by every keyframe in ``kids`` at slots start..start+n."""
    return [store.add_map_point(np.zeros(3), {k: start + i for k in kids}) for i in range(n)]


def _snapshot(store):
    descs = {pid: p.descriptor.tobytes() for pid, p in store.points.items()}
    covis = {k: dict(v) for k, v in store.covis.items()}
    links = {k: kf.links.tobytes() for k, kf in store.keyframes.items()}
    return store.export_text(), covis, links, descs


def test_first_keyframe_has_no_edges(rng):
    store = _store_with(rng, 1)
    assert store.covis[0] == {}
    assert store.keyframes[0].parent is None


def test_shared_points_weight(rng):
    store = _store_with(rng, 2)
    _share(store, [0, 1], 40)
    # brute-force recount from the observation lists
    shared = sum(1 for p in store.points.values() if {0, 1} <= set(p.observations))
    assert store.weight(0, 1) == store.weight(1, 0) == shared == 40


def test_weak_sharing_is_isolated(rng):
    store = _store_with(rng, 3)
    _share(store, [0, 1], 20)
    _share(store, [1, 2], 5, start=20)
    assert store.neighbors(2) == []
    assert store.neighbors(0) == [1]


def test_keyframe_without_pose(rng):
    f = make_frame(rng, 0)
    f.pose = None
    with pytest.raises(NoPose):
        MapStore().insert_keyframe(f)


def test_add_remove_restores_state(rng):
    store = _store_with(rng, 3)
    _share(store, [0, 1, 2], 5)
    before = _snapshot(store)
    pid = store.add_map_point([1, 2, 3], {0: 10, 2: 11})
    assert _snapshot(store) != before
    store.remove_map_point(pid)
    assert _snapshot(store) == before


def test_add_two_observations_increments_weight(rng):
    store = _store_with(rng, 2)
    _share(store, [0, 1], 3)
    w = store.weight(0, 1)
    store.add_map_point(np.zeros(3), {0: 30, 1: 31})
    assert store.weight(0, 1) == w + 1
    assert store.audit() == []


def test_add_with_dead_keyframe(rng):
    store = _store_with(rng, 2)
    with pytest.raises(DanglingKeyFrame):
        store.add_map_point(np.zeros(3), {0: 0, 7: 0})


def test_local_neighborhood_isolated(rng):
    store = _store_with(rng, 2)
    own = _share(store, [1], 4)
    kfs, pts = store.local_neighborhood(1)
    assert kfs == [1] and pts == sorted(own)


def test_local_neighborhood_chain(rng):
    store = _store_with(rng, 3)
    ab = _share(store, [0, 1], 20)
    bc = _share(store, [1, 2], 20, start=20)
    kfs, pts = store.local_neighborhood(1)
    assert kfs == [0, 1, 2]
    assert pts == sorted(ab + bc)
    kfs, pts = store.local_neighborhood(0)
    assert kfs == [0, 1]
    assert pts == sorted(ab + bc)  # B observes the B-C points too


def test_cull_unique_views(rng):
    store = _store_with(rng, 5)
    for k in range(5):
        _share(store, [k], 10)
    assert store.cull_keyframes() == []


def test_cull_removes_duplicate(rng):
    store = _store_with(rng, 4)
    _share(store, [0, 1, 2, 3], 30)
    removed = store.cull_keyframes()
    assert removed == [3]
    assert store.audit() == []
    assert 3 in store.culled


def test_audit_empty_store():
    assert MapStore().audit() == []


def test_audit_detects_corruption(rng):
    store = _store_with(rng, 2)
    pid = _share(store, [0, 1], 5)[2]
    idx = store.points[pid].observations[1]
    store.keyframes[1].links[idx] = -1  # break one back-link behind the store's back
    issues = store.audit()
    assert len(issues) == 1 and "back-link" in issues[0]


def test_merge_union_of_observations(rng):
    store = _store_with(rng, 3)
    a = store.add_map_point(np.zeros(3), {0: 0, 1: 0})
    b = store.add_map_point(np.zeros(3), {1: 1, 2: 0})
    store.merge_points(a, b)
    assert b not in store.points
    assert set(store.points[a].observations) == {0, 1, 2}
    assert store.audit() == []


def test_workload_200_ops():
    store, counts = random_workload(200, seed=3, check_every=1)
    assert store.audit() == []
    assert sum(counts.values()) > 150


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_workload_property(seed):
    store, _ = random_workload(200, seed=seed)
    assert store.audit() == []
