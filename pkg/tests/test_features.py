import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftslam.errors import MalformedFile, MissingFrame, VariantMismatch
from liftslam.features import (
    BINARY,
    FLOAT,
    AdaptiveConfig,
    Descriptor,
    FeatureSet,
    MatchThresholds,
    adapt_thresholds,
    descriptor_distance,
    match_descriptors,
    provider_from_files,
    provider_native,
    provider_synthetic,
    read_features,
    write_features,
)
from liftslam.geometry import PoseSE3


def test_float_distance_345():
    assert descriptor_distance(Descriptor.float([0, 0, 0, 0]), Descriptor.float([3, 4, 0, 0])) == 5.0


def test_binary_distance_identity():
    a = Descriptor.binary(0b1010, 4)
    assert descriptor_distance(a, Descriptor.binary(0b1010, 4)) == 0


def test_binary_distance_all_bits():
    assert descriptor_distance(Descriptor.binary(0b1111, 4), Descriptor.binary(0b0000, 4)) == 4


def test_distance_variant_mismatch():
    with pytest.raises(VariantMismatch):
        descriptor_distance(Descriptor.float([0.0]), Descriptor.binary(1, 8))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=4, max_size=4), st.lists(st.integers(0, 255), min_size=4, max_size=4))
def test_hamming_matches_bit_count(a, b):
    da = Descriptor(BINARY, np.array(a, dtype=np.uint8))
    db = Descriptor(BINARY, np.array(b, dtype=np.uint8))
    expected = sum(bin(x ^ y).count("1") for x, y in zip(a, b))
    assert descriptor_distance(da, db) == expected


def _fs(desc, rng=None):
    desc = np.asarray(desc, float)
    kp = np.arange(2 * len(desc), dtype=float).reshape(-1, 2)
    return FeatureSet(kp, desc)


def test_identical_sets_identity_matching(rng):
    d = rng.normal(size=(15, 8)) * 10
    m = match_descriptors(_fs(d), _fs(d), MatchThresholds(0.5, 0.5))
    assert [(q, t) for q, t, _ in m] == [(i, i) for i in range(15)]
    assert all(dist == 0 for *_, dist in m)


def test_far_sets_no_matches(rng):
    a = rng.normal(size=(10, 4))
    b = a + 100.0
    assert match_descriptors(_fs(a), _fs(b), MatchThresholds(1.0, 2.0)) == []


def test_noisy_copy_brute_force(rng):
    th = MatchThresholds(1.0, 2.0)
    base = rng.normal(size=(20, 16)) * 10  # spacing far above 2 * th_high
    noisy = base + rng.normal(size=base.shape) * (0.25 / np.sqrt(16))
    m = match_descriptors(_fs(noisy), _fs(base), th, strict=True)
    # independent oracle: every query's nearest train index by brute force
    D = np.array([[np.linalg.norm(q - t) for t in base] for q in noisy])
    assert D.min(axis=1).max() < th.th_low / 2
    assert np.sort(D, axis=1)[:, 1].min() > 2 * th.th_high
    assert [(q, t) for q, t, _ in m] == [(i, int(np.argmin(D[i]))) for i in range(20)]
    assert [(q, t) for q, t, _ in m] == [(i, i) for i in range(20)]


def test_match_rejects_mixed_variants():
    a = FeatureSet(np.zeros((1, 2)), np.zeros((1, 4)))
    b = FeatureSet(np.zeros((1, 2)), np.zeros((1, 4), np.uint8), BINARY)
    with pytest.raises(VariantMismatch):
        match_descriptors(a, b, MatchThresholds())


CFG = AdaptiveConfig(1.0, 4.0, 0.3, 0.8)


def test_adapt_saturates_high_margin():
    assert adapt_thresholds(100, 10, CFG).th_low == CFG.th_min  # margin 0.9


def test_adapt_saturates_low_margin():
    assert adapt_thresholds(100, 80, CFG).th_low == CFG.th_max  # margin 0.2


def test_adapt_midpoint():
    # margin 0.55 is halfway between the breakpoints
    assert adapt_thresholds(100, 45, CFG).th_low == pytest.approx(2.5, abs=1e-12)


def test_adapt_monotone_sweep():
    lows = [adapt_thresholds(1000, o, CFG).th_low for o in range(0, 1001, 10)]
    assert all(b >= a for a, b in zip(lows, lows[1:]))
    assert lows[0] == CFG.th_min and lows[-1] == CFG.th_max


def test_adapt_keeps_ordering():
    for o in range(0, 101, 7):
        th = adapt_thresholds(100, o, CFG)
        assert CFG.th_min <= th.th_low <= th.th_high <= CFG.th_max


def test_feature_file_two_records(tmp_path):
    p = tmp_path / "000000.feat"
    p.write_text("FEAT v1 2 float 3\n1.5 2.5 0.9 0.1 0 1.0 2.0 3.0\n10 20 0.5 -0.2 2 -1 0 1e-3\n")
    fs = read_features(p)
    assert len(fs) == 2
    assert fs.keypoints.tolist() == [[1.5, 2.5], [10.0, 20.0]]
    assert fs.response.tolist() == [0.9, 0.5]
    assert fs.orientation.tolist() == [0.1, -0.2]
    assert fs.scale.tolist() == [0, 2]
    assert fs.descriptors.tolist() == [[1.0, 2.0, 3.0], [-1.0, 0.0, 1e-3]]


def test_feature_file_empty(tmp_path):
    p = tmp_path / "x.feat"
    p.write_text("FEAT v1 0 float 128\n")
    assert len(read_features(p)) == 0


@pytest.mark.parametrize("variant", [FLOAT, BINARY])
def test_feature_file_roundtrip_1000(tmp_path, rng, variant):
    n = 1000
    if variant == FLOAT:
        desc = rng.normal(size=(n, 32))
    else:
        desc = rng.integers(0, 256, (n, 32), dtype=np.uint8)
    fs = FeatureSet(rng.uniform(0, 640, (n, 2)), desc, variant, rng.random(n), rng.uniform(-3, 3, n),
                    rng.integers(0, 8, n))
    write_features(tmp_path / "a.feat", fs)
    back = read_features(tmp_path / "a.feat")
    assert back.descriptors.dtype == fs.descriptors.dtype
    assert back.descriptors.tobytes() == fs.descriptors.tobytes()
    assert back.keypoints.tobytes() == fs.keypoints.tobytes()
    assert back.response.tobytes() == fs.response.tobytes()
    assert back.orientation.tobytes() == fs.orientation.tobytes()
    assert np.array_equal(back.scale, fs.scale)


@pytest.mark.parametrize("text, where", [
    ("FEAT v2 0 float 1\n", ":1:"),
    ("FEAT v1 1 float 2\n1 2 0 0 0 1.0\n", ":2:"),
    ("FEAT v1 1 binary 1\n1 2 0 0 0 zz\n", "field 5"),
    ("FEAT v1 2 float 1\n1 2 0 0 0 1.0\n", "2 records"),
])
def test_feature_file_malformed(tmp_path, text, where):
    p = tmp_path / "bad.feat"
    p.write_text(text)
    with pytest.raises(MalformedFile, match=where):
        read_features(p)


def test_file_provider_missing_frame(tmp_path):
    prov = provider_from_files(tmp_path)
    with pytest.raises(MissingFrame):
        prov(3)


def _checkerboard(n=8, cell=24):
    board = (np.indices((n, n)).sum(axis=0) % 2).astype(float)
    img = np.kron(board, np.ones((cell, cell)))
    return np.pad(img, 40, constant_values=0.5)


def test_native_uniform_image():
    assert len(provider_native().detect(np.full((120, 160), 0.5))) == 0


def test_native_checkerboard_in_bounds():
    img = _checkerboard()
    fs = provider_native().detect(img)
    assert len(fs) > 0
    h, w = img.shape
    assert np.all((fs.keypoints >= 0) & (fs.keypoints < [w, h]))
    assert fs.variant == BINARY and fs.desc_len == 32


def test_native_deterministic():
    img = _checkerboard()
    a, b = provider_native().detect(img), provider_native().detect(img)
    assert np.array_equal(a.keypoints, b.keypoints)
    assert np.array_equal(a.descriptors, b.descriptors)


def test_synthetic_behind_camera_absent(cam):
    pts = np.array([[0, 0, 5.0], [0, 0, -5.0], [0.5, 0.2, 6.0]])
    prov = provider_synthetic(pts, cam, [PoseSE3.identity()], desc_dim=16)
    fs = prov(0)
    assert sorted(fs.landmark_ids.tolist()) == [0, 2]


def _common_match(a, b, th):
    m = match_descriptors(a, b, th, strict=True)
    return sorted((int(a.landmark_ids[q]), int(b.landmark_ids[t])) for q, t, _ in m)


def test_synthetic_zero_noise_common_visibility(circle):
    _, world = circle
    prov = world.provider()
    a, b = prov(10), prov(18)
    common = sorted(set(a.landmark_ids.tolist()) & set(b.landmark_ids.tolist()))
    assert common
    assert _common_match(a, b, MatchThresholds(1.0, 2.0)) == [(i, i) for i in common]


def test_synthetic_small_noise_same_association(circle):
    _, world = circle
    clean, noisy = world.provider(), world.provider(noise_sigma=0.1)
    th = MatchThresholds(1.0, 2.0)
    assert _common_match(noisy(10), noisy(18), th) == _common_match(clean(10), clean(18), th)


def test_synthetic_noise_norm(circle):
    _, world = circle
    clean, noisy = world.provider(shuffle=False), world.provider(noise_sigma=2.0, shuffle=False)
    d = np.linalg.norm(noisy(5).descriptors - clean(5).descriptors, axis=1)
    assert np.sqrt(np.mean(d * d)) == pytest.approx(2.0, rel=0.05)
