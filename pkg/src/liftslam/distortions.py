"""Image distortions and frame skipping for robustness studies, plus a
matching-quality metric.

Images are float arrays in [0, 1]; quantization happens only at file I/O.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoGroundTruth


def _check(img):
    a = np.asarray(img, dtype=float)
    if a.size == 0:
        raise ValueError("empty image")
    return a


def gamma_transform(img, gamma: float):
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return np.clip(np.power(_check(img), gamma), 0.0, 1.0)


def quantile_truncate(img, which: str = "Q1"):
    """Clamp intensities below the 25th (Q1) or above the 75th (Q3) percentile.

    The percentile is read off the sorted intensities at rank ``p (n - 1)``;
    when that rank falls between two samples the one on the clamped side is
    used, so the clamp value is itself a pixel value and a second application
    changes nothing.
    """
    a = _check(img)
    if which.upper() == "Q1":
        q = np.percentile(a, 25, method="lower")
        return np.maximum(a, q)
    if which.upper() == "Q3":
        q = np.percentile(a, 75, method="higher")
        return np.minimum(a, q)
    raise ValueError(f"which must be Q1 or Q3, got {which!r}")


def salt_pepper(img, p: float, seed: int = 0):
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    a = _check(img).copy()
    rng = np.random.default_rng(seed)
    hit = rng.random(a.shape) < p
    a[hit] = (rng.random(int(hit.sum())) < 0.5).astype(float)
    return a


def skip_frames(sequence, n: int):
    """Keep every ``n``-th element, starting with the first."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return list(sequence)[::n]


@dataclass(frozen=True)
class DistortionSpec:
    kind: str  # gamma | q1 | q3 | saltpepper | skip
    value: float = 1.0
    seed: int = 0

    def apply(self, img, index: int = 0):
        k = self.kind.lower()
        if k == "gamma":
            return gamma_transform(img, self.value)
        if k in ("q1", "q3"):
            return quantile_truncate(img, k.upper())
        if k == "saltpepper":
            # a distinct but reproducible pattern per frame
            return salt_pepper(img, self.value, seed=self.seed * 1_000_003 + index)
        if k == "skip":
            return np.asarray(img, dtype=float)
        raise ValueError(f"unknown distortion {self.kind!r}")


@dataclass
class MatchQuality:
    precision: float
    spread: float
    n_matches: int
    undefined: bool = False


def match_quality(matches, truth, keypoints, width, height) -> MatchQuality:
    """Precision against ground truth and the spatial spread of matched keypoints.

    ``truth`` maps a query index to its correct train index (a dict, or an
    array with -1 for unknown). ``keypoints`` are the query keypoint locations.
    Spread is the mean distance of matched keypoints to their centroid,
    divided by the image diagonal.
    """
    if truth is None:
        raise NoGroundTruth("match quality needs a ground-truth correspondence")
    if len(matches) == 0:
        return MatchQuality(0.0, 0.0, 0, undefined=True)
    if isinstance(truth, dict):
        lookup = truth.get
    else:
        arr = np.asarray(truth)

        def lookup(q):
            return int(arr[q]) if 0 <= q < len(arr) and arr[q] >= 0 else None

    correct = sum(1 for q, t, *_ in matches if lookup(q) == t)
    pts = np.asarray(keypoints, dtype=float)[[m[0] for m in matches]]
    spread = float(np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean() / np.hypot(width, height))
    return MatchQuality(correct / len(matches), spread, len(matches))
