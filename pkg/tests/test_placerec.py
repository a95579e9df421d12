import math

import numpy as np
import pytest

from liftslam.errors import LoopRejected, TooFewDescriptors
from liftslam.features import FeatureSet, landmark_codes
from liftslam.geometry import CameraIntrinsics, PoseSE3
from liftslam.mapstore import Frame, MapStore, StoreConfig
from liftslam.placerec import (
    KeyFrameDatabase,
    LoopCandidate,
    LoopConfig,
    Vocabulary,
    close_loop,
    detect_loop,
    l2_score,
    to_bow,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build(landmark_codes(2000, 128, 0), levels=3, branching=10, seed=0)


def test_planted_clusters(rng):
    true_c = rng.normal(size=(10, 16)) * 50
    X = np.concatenate([c + rng.normal(size=(100, 16)) for c in true_c])
    radius = max(np.linalg.norm(X[i * 100:(i + 1) * 100] - true_c[i], axis=1).max() for i in range(10))
    v = Vocabulary.build(X, levels=1, branching=10, seed=0)
    assert len(v) == 10
    leaves = v.centers[v.leaves]
    D = np.linalg.norm(leaves[:, None] - true_c[None], axis=2)
    assert sorted(np.argmin(D, axis=1)) == list(range(10))
    assert D.min(axis=1).max() < radius


def test_leaf_count_bounded(rng):
    X = rng.normal(size=(20000, 8))
    v = Vocabulary.build(X, levels=3, branching=10, seed=0, kmeans_iters=3)
    assert 0 < len(v) <= 10**3


def test_too_few_descriptors(rng):
    with pytest.raises(TooFewDescriptors):
        Vocabulary.build(rng.normal(size=(5, 8)), levels=2, branching=10)


def test_vocab_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "v.txt")
    back = Vocabulary.load(tmp_path / "v.txt")
    assert np.array_equal(back.centers, vocab.centers)
    assert np.array_equal(back.weights, vocab.weights)
    X = landmark_codes(50, 128, 3)
    assert np.array_equal(back.transform(X), vocab.transform(X))


def test_transform_matches_greedy_descent(vocab, rng):
    X = rng.normal(size=(200, 128))
    words = vocab.transform(X)
    for x, w in zip(X, words):
        node = 0
        while len(vocab.children[node]):
            ch = vocab.children[node]
            node = int(ch[np.argmin(np.linalg.norm(vocab.centers[ch] - x, axis=1))])
        assert node == w


def test_bow_empty(vocab):
    assert to_bow(FeatureSet.empty(desc_len=128), vocab) == {}


def test_bow_single_word(vocab):
    d = np.tile(landmark_codes(1, 128, 9), (12, 1))
    bow = to_bow(d, vocab)
    assert list(bow.values()) == [1.0]


def test_bow_duplication_invariant(vocab):
    d = landmark_codes(40, 128, 5)
    assert to_bow(np.concatenate([d, d]), vocab) == to_bow(d, vocab)


def test_l2_score_identical():
    a = {1: 0.3, 5: 0.7}
    assert l2_score(a, dict(a)) == 1.0


def test_l2_score_disjoint():
    assert l2_score({1: 1.0}, {2: 1.0}) == pytest.approx(1 - 0.5 * math.sqrt(2), abs=1e-15)


def test_l2_score_empty():
    assert l2_score({}, {1: 1.0}) == 0.0


def _frames_bows(vocab, n=50, seed=0):
    rng = np.random.default_rng(seed)
    codes = landmark_codes(2000, 128, 0)
    out = []
    for k in range(n):
        ids = rng.choice(2000, 60, replace=False)
        out.append(to_bow(codes[ids] + rng.normal(size=(60, 128)) * 0.05, vocab))
    return out


def test_db_self_query_top1(vocab):
    db = KeyFrameDatabase()
    bows = _frames_bows(vocab)
    for k, b in enumerate(bows):
        db.add(k, b)
    for k, b in enumerate(bows):
        top = db.query(b)[0]
        assert top[0] == k and top[1] == 1.0


def test_db_empty():
    assert KeyFrameDatabase().query_relocalization({3: 1.0}) == []


def test_db_ranking_brute_force(vocab):
    db = KeyFrameDatabase()
    bows = _frames_bows(vocab)
    for k, b in enumerate(bows):
        db.add(k, b)
    for q in _frames_bows(vocab, 10, seed=1):
        brute = sorted(((k, l2_score(q, b)) for k, b in enumerate(bows)), key=lambda t: (-t[1], t[0]))
        brute = [k for k, s in brute if s >= 0.05]
        assert db.query_relocalization(q) == brute


def test_db_remove(vocab):
    db = KeyFrameDatabase()
    db.add(0, {1: 1.0})
    db.add(1, {1: 0.5, 2: 0.5})
    db.remove(0)
    assert db.query_relocalization({1: 1.0}) == [1]
    assert db.index == {1: [1], 2: [1]}


# -- loop detection on a hand-built covisibility graph ----------------------

def _loop_store(n_consistent):
    """Keyframes 0..14; 0..n-1 look like keyframe 14 and are mutually covisible."""
    rng = np.random.default_rng(0)
    store = MapStore(StoreConfig(covis_min=5))
    revisit = {100: 0.5, 101: 0.5}
    for k in range(15):
        fs = FeatureSet(rng.uniform(0, 100, (30, 2)), rng.normal(size=(30, 4)))
        if k < n_consistent or k == 14:
            bow = dict(revisit)
        else:
            bow = {k: 1.0}
        store.insert_keyframe(Frame(k, float(k), fs, PoseSE3()), bow)
    for k in range(n_consistent - 1):
        for i in range(6):
            store.add_map_point(np.zeros(3), {k: i, k + 1: 10 + i})
    if n_consistent >= 3:
        for i in range(6):  # close the clique
            store.add_map_point(np.zeros(3), {0: 20 + i, n_consistent - 1: 20 + i})
    db = KeyFrameDatabase()
    for k, kf in store.keyframes.items():
        db.add(k, kf.bow)
    return store, db


def test_loop_three_candidates_accepted():
    store, db = _loop_store(3)
    cand = detect_loop(14, store, db, LoopConfig(temporal_gap=0))
    assert cand is not None
    assert cand.current == 14 and cand.candidate in (0, 1, 2)
    assert cand.group == [0, 1, 2]


def test_loop_two_candidates_rejected():
    store, db = _loop_store(2)
    assert detect_loop(14, store, db, LoopConfig(temporal_gap=0)) is None


def test_loop_disjoint_words():
    store, db = _loop_store(0)
    store.keyframes[14].bow = {999: 1.0}
    db.add(14, {999: 1.0})
    assert detect_loop(14, store, db, LoopConfig(temporal_gap=0)) is None


def test_close_loop_too_few_matches():
    store, db = _loop_store(3)
    cam = CameraIntrinsics(50, 50, 50, 50, 100, 100)
    before = store.export_text()
    with pytest.raises(LoopRejected):
        close_loop(store, db, LoopCandidate(14, 0, 1.0, [0, 1, 2]), cam, 1.0)
    assert store.export_text() == before


@pytest.mark.slow
def test_million_descriptor_leaf_bound():
    X = np.random.default_rng(0).standard_normal((1_000_000, 8))
    v = Vocabulary.build(X, levels=6, branching=10, seed=0, kmeans_iters=3)
    assert 0 < len(v) <= 10**6
