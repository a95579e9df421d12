"""Keypoints, descriptors, matching and feature providers.

Float descriptors are compared with the Euclidean distance and binary ones
(stored as packed ``uint8`` bytes) with the Hamming distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ImageTooSmall, MalformedFile, MissingFrame, VariantMismatch
from .geometry import CameraIntrinsics, PoseSE3, project_many

FLOAT = "float"
BINARY = "binary"
VARIANTS = (FLOAT, BINARY)


@dataclass
class FeatureSet:
    """Keypoints and descriptors of one frame, stored column-wise."""

    keypoints: np.ndarray  # (N, 2) pixel x, y
    descriptors: np.ndarray  # (N, D) float64, or (N, B) uint8 for binary
    variant: str = FLOAT
    response: np.ndarray | None = None
    orientation: np.ndarray | None = None
    scale: np.ndarray | None = None
    # ground-truth landmark ids, only filled by the synthetic provider
    landmark_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantMismatch(f"unknown descriptor variant {self.variant!r}")
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        n = len(self.keypoints)
        dtype = np.uint8 if self.variant == BINARY else np.float64
        d = np.asarray(self.descriptors, dtype=dtype)
        self.descriptors = d.reshape(n, -1) if d.size or n else d.reshape(0, 0)
        if len(self.descriptors) != n:
            raise ValueError("descriptor count differs from keypoint count")
        if self.variant == FLOAT and not np.all(np.isfinite(self.descriptors)):
            raise ValueError("float descriptors must be finite")
        self.response = np.zeros(n) if self.response is None else np.asarray(self.response, dtype=float)
        self.orientation = np.zeros(n) if self.orientation is None else np.asarray(self.orientation, dtype=float)
        self.scale = np.zeros(n, dtype=int) if self.scale is None else np.asarray(self.scale).astype(int)

    def __len__(self):
        return len(self.keypoints)

    @property
    def desc_len(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    @classmethod
    def empty(cls, variant=FLOAT, desc_len=0):
        dtype = np.uint8 if variant == BINARY else np.float64
        return cls(np.zeros((0, 2)), np.zeros((0, desc_len), dtype=dtype), variant)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=int)
        return FeatureSet(
            self.keypoints[idx],
            self.descriptors[idx],
            self.variant,
            self.response[idx],
            self.orientation[idx],
            self.scale[idx],
            None if self.landmark_ids is None else self.landmark_ids[idx],
        )


@dataclass(frozen=True)
class Descriptor:
    variant: str
    payload: np.ndarray

    @classmethod
    def float(cls, values):
        return cls(FLOAT, np.asarray(values, dtype=np.float64))

    @classmethod
    def binary(cls, bits: Sequence[int] | int, nbits: int | None = None):
        """From a bit sequence (MSB first) or an integer with ``nbits`` bits."""
        if isinstance(bits, (int, np.integer)):
            if nbits is None:
                raise ValueError("nbits required for integer payloads")
            bits = [(int(bits) >> (nbits - 1 - i)) & 1 for i in range(nbits)]
        return cls(BINARY, np.packbits(np.asarray(bits, dtype=np.uint8)))


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    if a.variant != b.variant or a.payload.shape != b.payload.shape:
        raise VariantMismatch(f"cannot compare {a.variant}[{a.payload.size}] with {b.variant}[{b.payload.size}]")
    if a.variant == FLOAT:
        return float(np.sqrt(np.sum((a.payload - b.payload) ** 2)))
    return float(np.bitwise_count(np.bitwise_xor(a.payload, b.payload)).sum())


def hamming_matrix(A, B, chunk=256):
    A = np.asarray(A, dtype=np.uint8)
    B = np.asarray(B, dtype=np.uint8)
    out = np.empty((len(A), len(B)))
    for s in range(0, len(A), chunk):
        x = np.bitwise_xor(A[s : s + chunk, None, :], B[None, :, :])
        out[s : s + chunk] = np.bitwise_count(x).sum(axis=2)
    return out


def distance_matrix(A, B, variant=FLOAT):
    """All-pairs distances between two descriptor arrays of one variant."""
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    if A.shape[1] != B.shape[1]:
        raise VariantMismatch(f"descriptor lengths differ: {A.shape[1]} vs {B.shape[1]}")
    if variant == BINARY:
        return hamming_matrix(A, B)
    return cdist(A, B)


def row_distances(A, B, variant=FLOAT):
    """Distance between ``A[i]`` and ``B[i]`` for every row."""
    if len(A) == 0:
        return np.zeros(0)
    if variant == BINARY:
        return np.bitwise_count(np.bitwise_xor(A, B)).sum(axis=1).astype(float)
    return np.sqrt(np.sum((A - B) ** 2, axis=1))


def check_compatible(a: FeatureSet, b: FeatureSet):
    if a.variant != b.variant:
        raise VariantMismatch(f"variant {a.variant} vs {b.variant}")
    if len(a) and len(b) and a.desc_len != b.desc_len:
        raise VariantMismatch(f"descriptor length {a.desc_len} vs {b.desc_len}")


# ---------------------------------------------------------------------------
# thresholds and matching


@dataclass(frozen=True)
class MatchThresholds:
    th_low: float = 1.0
    th_high: float = 2.0

    def __post_init__(self):
        if not (0 < self.th_low <= self.th_high):
            raise ValueError(f"need 0 < th_low <= th_high, got {self.th_low}, {self.th_high}")


KITTI_THRESHOLDS = MatchThresholds(2.0, 3.0)
EUROC_THRESHOLDS = MatchThresholds(1.0, 2.0)


@dataclass(frozen=True)
class AdaptiveConfig:
    th_min: float = 1.0
    th_max: float = 4.0
    ratio_floor: float = 0.3
    ratio_ceil: float = 0.8

    def __post_init__(self):
        if not (0 < self.th_min < self.th_max):
            raise ValueError("need 0 < th_min < th_max")
        if not (0 <= self.ratio_floor < self.ratio_ceil <= 1):
            raise ValueError("need 0 <= ratio_floor < ratio_ceil <= 1")


def adapt_thresholds(map_point_count: int, outlier_count: int, cfg: AdaptiveConfig) -> MatchThresholds:
    """Loosen thresholds when few tracked map points survive, tighten when many do."""
    m = max(int(map_point_count), 0)
    o = min(max(int(outlier_count), 0), m)
    if m == 0:
        low = cfg.th_max
    else:
        margin = (m - o) / m
        if margin <= cfg.ratio_floor:
            low = cfg.th_max
        elif margin >= cfg.ratio_ceil:
            low = cfg.th_min
        else:
            u = (margin - cfg.ratio_floor) / (cfg.ratio_ceil - cfg.ratio_floor)
            low = cfg.th_max + u * (cfg.th_min - cfg.th_max)
    low = min(max(low, cfg.th_min), cfg.th_max)
    high = min(max(1.5 * low, cfg.th_min), cfg.th_max)
    return MatchThresholds(low, high)


def mutual_nearest(D, max_dist):
    """Mutual nearest neighbours in a distance matrix; ties go to the lowest index."""
    if D.size == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    best_t = np.argmin(D, axis=1)
    best_q = np.argmin(D, axis=0)
    q = np.arange(D.shape[0])
    d = D[q, best_t]
    keep = (best_q[best_t] == q) & (d <= max_dist)
    return q[keep], best_t[keep], d[keep]


def match_descriptors(query: FeatureSet, train: FeatureSet, th: MatchThresholds, strict: bool = False):
    """Mutual-nearest-neighbour matches as ``(query_idx, train_idx, distance)`` tuples."""
    check_compatible(query, train)
    D = distance_matrix(query.descriptors, train.descriptors, query.variant)
    qi, ti, d = mutual_nearest(D, th.th_low if strict else th.th_high)
    return [(int(a), int(b), float(c)) for a, b, c in zip(qi, ti, d)]


# ---------------------------------------------------------------------------
# feature files


def write_features(path, fs: FeatureSet):
    """Write a ``FEAT v1`` file. Float payloads use ``repr`` for exact round trips."""
    lines = [f"FEAT v1 {len(fs)} {fs.variant} {fs.desc_len}"]
    for i in range(len(fs)):
        head = [repr(float(fs.keypoints[i, 0])), repr(float(fs.keypoints[i, 1])), repr(float(fs.response[i])),
                repr(float(fs.orientation[i])), str(int(fs.scale[i]))]
        if fs.variant == FLOAT:
            body = [repr(float(v)) for v in fs.descriptors[i]]
        else:
            body = [f"{int(v):02x}" for v in fs.descriptors[i]]
        lines.append(" ".join(head + body))
    Path(path).write_text("\n".join(lines) + "\n")


def read_features(path) -> FeatureSet:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text:
        raise MalformedFile(f"{path}:1: missing header")
    head = text[0].split()
    if len(head) != 5 or head[0] != "FEAT" or head[1] != "v1":
        raise MalformedFile(f"{path}:1: bad header {text[0]!r}")
    try:
        count, variant, dlen = int(head[2]), head[3], int(head[4])
    except ValueError:
        raise MalformedFile(f"{path}:1: bad header {text[0]!r}") from None
    if variant not in VARIANTS or count < 0 or dlen < 0:
        raise MalformedFile(f"{path}:1: bad header {text[0]!r}")
    records = [ln for ln in text[1:] if ln.strip()]
    if len(records) != count:
        raise MalformedFile(f"{path}: header announces {count} records, found {len(records)}")
    kp = np.zeros((count, 2))
    resp = np.zeros(count)
    ori = np.zeros(count)
    sc = np.zeros(count, dtype=int)
    desc = np.zeros((count, dlen), dtype=np.uint8 if variant == BINARY else np.float64)
    for i, line in enumerate(records):
        lineno = i + 2
        tok = line.split()
        if len(tok) != 5 + dlen:
            raise MalformedFile(f"{path}:{lineno}: expected {5 + dlen} fields, found {len(tok)}")
        try:
            kp[i] = float(tok[0]), float(tok[1])
            resp[i], ori[i] = float(tok[2]), float(tok[3])
            sc[i] = int(tok[4])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: {exc}") from None
        for j, t in enumerate(tok[5:]):
            try:
                desc[i, j] = float(t) if variant == FLOAT else int(t, 16)
            except (ValueError, OverflowError):
                raise MalformedFile(f"{path}:{lineno}: field {5 + j}: bad descriptor token {t!r}") from None
    if variant == FLOAT and not np.all(np.isfinite(desc)):
        raise MalformedFile(f"{path}: non-finite descriptor value")
    return FeatureSet(kp, desc, variant, resp, ori, sc)


def _frame_key(frame):
    """Providers accept a frame record (with ``index``/``name``) or a bare id."""
    return getattr(frame, "name", frame), getattr(frame, "index", frame)


class FileFeatureProvider:
    """Serves precomputed ``<frame_id>.feat`` files from a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise MissingFrame(f"feature directory {self.directory} does not exist")
        self._files = {p.stem: p for p in self.directory.glob("*.feat")}
        self._numeric = {}
        for stem, p in self._files.items():
            if stem.isdigit():
                self._numeric.setdefault(int(stem), p)

    def __call__(self, frame) -> FeatureSet:
        name, index = _frame_key(frame)
        p = self._files.get(str(name))
        if p is None and isinstance(index, (int, np.integer)):
            p = self._numeric.get(int(index))
        if p is None:
            raise MissingFrame(f"no feature file for frame {name!r} in {self.directory}")
        return read_features(p)


def provider_from_files(directory) -> FileFeatureProvider:
    return FileFeatureProvider(directory)


@dataclass
class NativeConfig:
    n_features: int = 1000
    scale_factor: float = 1.2
    n_levels: int = 8
    fast_threshold: int = 20
    patch_size: int = 31


class NativeFeatureProvider:
    """FAST corners on a pyramid with oriented 256-bit binary descriptors (OpenCV ORB)."""

    def __init__(self, cfg: NativeConfig | None = None):
        import cv2

        self.cfg = cfg or NativeConfig()
        self._cv2 = cv2
        self._orb = cv2.ORB_create(
            nfeatures=self.cfg.n_features,
            scaleFactor=self.cfg.scale_factor,
            nlevels=self.cfg.n_levels,
            edgeThreshold=self.cfg.patch_size,
            patchSize=self.cfg.patch_size,
            fastThreshold=self.cfg.fast_threshold,
        )

    def detect(self, image) -> FeatureSet:
        img = np.asarray(image)
        if img.ndim != 2:
            raise ValueError("native provider expects a grayscale image")
        if min(img.shape) < self.cfg.patch_size:
            raise ImageTooSmall(f"image {img.shape} smaller than the {self.cfg.patch_size}px descriptor patch")
        if img.dtype != np.uint8:
            img = np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)
        kps, desc = self._orb.detectAndCompute(img, None)
        if not kps or desc is None:
            return FeatureSet.empty(BINARY, 32)
        pts = np.array([k.pt for k in kps])
        return FeatureSet(
            pts,
            desc,
            BINARY,
            np.array([k.response for k in kps]),
            np.radians([k.angle for k in kps]),
            np.array([k.octave for k in kps]),
        )

    def __call__(self, frame) -> FeatureSet:
        if hasattr(frame, "load_image"):
            return self.detect(frame.load_image())
        return self.detect(frame)


def provider_native(cfg: NativeConfig | None = None) -> NativeFeatureProvider:
    return NativeFeatureProvider(cfg)


# ---------------------------------------------------------------------------
# synthetic provider


def landmark_codes(n: int, dim: int = 128, seed: int = 0) -> np.ndarray:
    """Unit-variance Gaussian code per landmark; codes are ~sqrt(2 dim) apart."""
    return np.random.default_rng([seed, 7919]).standard_normal((n, dim))


class SyntheticFeatureProvider:
    """Projects known landmarks through the true trajectory.

    ``noise_sigma`` (a float, per-frame sequence, or callable of the frame
    index) is the RMS norm of the Gaussian noise added to each descriptor, so
    two independent noisy copies of one code are about ``sigma * sqrt(2)``
    apart. ``drift`` is a per-frame world displacement: a landmark seen
    continuously since frame ``f`` is observed in frame ``k`` as if it had
    moved by ``-(k - f) * drift``. This is exactly what a camera whose
    estimated position drifts by ``drift`` per frame would see, and the
    inconsistency only surfaces when a landmark is re-acquired later (a loop).
    """

    def __init__(
        self,
        landmarks,
        cam: CameraIntrinsics,
        poses: Sequence[PoseSE3],
        *,
        desc_dim: int = 128,
        noise_sigma: float | Sequence[float] | Callable[[int], float] = 0.0,
        pixel_sigma: float = 0.0,
        drift=None,
        max_depth: float = math.inf,
        border: float = 1.0,
        seed: int = 0,
        shuffle: bool = True,
        codes=None,
    ):
        self.landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
        self.cam = cam
        self.poses = list(poses)
        self.desc_dim = desc_dim
        self.noise_sigma = noise_sigma
        self.pixel_sigma = pixel_sigma
        self.drift = None if drift is None else np.asarray(drift, dtype=float).reshape(3)
        self.max_depth = max_depth
        self.border = border
        self.seed = seed
        self.shuffle = shuffle
        self.codes = landmark_codes(len(self.landmarks), desc_dim, seed) if codes is None else np.asarray(codes, float)
        self._visible = [self._true_visibility(p) for p in self.poses]
        self._session_start = self._sessions() if self.drift is not None else None

    def _true_visibility(self, pose):
        uv, z, ok = project_many(self.landmarks, pose, self.cam)
        ok &= z < self.max_depth
        ok &= self.cam.in_image(uv, self.border)
        return ok

    def _sessions(self):
        start = np.zeros((len(self.poses), len(self.landmarks)), dtype=int)
        for k, vis in enumerate(self._visible):
            if k == 0:
                start[k] = 0
            else:
                cont = vis & self._visible[k - 1]
                start[k] = np.where(cont, start[k - 1], k)
        return start

    def sigma_at(self, k: int) -> float:
        s = self.noise_sigma
        if callable(s):
            return float(s(k))
        if isinstance(s, (int, float)):
            return float(s)
        return float(s[min(k, len(s) - 1)])

    def visible_ids(self, k: int) -> np.ndarray:
        return np.flatnonzero(self._visible[k])

    def __len__(self):
        return len(self.poses)

    def __call__(self, frame) -> FeatureSet:
        _, k = _frame_key(frame)
        k = int(k)
        if not 0 <= k < len(self.poses):
            raise MissingFrame(f"synthetic frame {k} out of range")
        ids = self.visible_ids(k)
        pts = self.landmarks[ids]
        if self.drift is not None:
            age = k - self._session_start[k, ids]
            pts = pts - age[:, None] * self.drift[None, :]
        uv, z, ok = project_many(pts, self.poses[k], self.cam)
        rng = np.random.default_rng([self.seed, k])
        if self.pixel_sigma > 0:
            uv = uv + rng.normal(0.0, self.pixel_sigma, uv.shape)
        ok &= self.cam.in_image(uv, 0.0)
        ids, uv = ids[ok], uv[ok]
        desc = self.codes[ids].copy()
        sigma = self.sigma_at(k)
        if sigma > 0:
            desc += rng.normal(0.0, sigma / math.sqrt(self.desc_dim), desc.shape)
        if self.shuffle:
            order = rng.permutation(len(ids))
            ids, uv, desc = ids[order], uv[order], desc[order]
        return FeatureSet(uv, desc, FLOAT, np.ones(len(ids)), None, None, ids)


def provider_synthetic(landmarks, cam, poses, **kwargs) -> SyntheticFeatureProvider:
    return SyntheticFeatureProvider(landmarks, cam, poses, **kwargs)
