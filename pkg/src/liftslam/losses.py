"""Training objectives of the learned detector/orientation/descriptor pipeline.

Only the loss mathematics lives here: the functions consume descriptor
vectors and detector score maps that a network would have produced.
Every differentiable loss has an analytic gradient alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .errors import LengthMismatch

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class DetectorLossConfig:
    gamma_balance: float = 1.0
    margin_c: float = 4.0
    alphas: tuple = (1 / 6, 1 / 6, 1 / 6, 3 / 6)
    labels: tuple = (1, 1, 1, -1)
    beta_class: float = 1.0  # sharpness of the per-map soft maximum
    beta_softargmax: float = 10.0

    def __post_init__(self):
        if len(self.alphas) != 4 or len(self.labels) != 4:
            raise ValueError("alphas and labels need 4 entries")
        if abs(sum(self.alphas) - 1.0) > 1e-12:
            raise ValueError("alphas must sum to 1")
        if any(y not in (-1, 1) for y in self.labels) or self.labels[3] != -1:
            raise ValueError("labels must be +-1 with the last one -1")
        if self.margin_c <= 0 or self.gamma_balance < 0:
            raise ValueError("margin_c must be positive and gamma_balance non-negative")


@dataclass
class DescriptorPair:
    d_k: np.ndarray
    d_l: np.ndarray
    relation: str = POSITIVE

    def __post_init__(self):
        self.d_k, self.d_l = _pair(self.d_k, self.d_l)
        if self.relation not in (POSITIVE, NEGATIVE):
            raise ValueError(f"relation must be {POSITIVE!r} or {NEGATIVE!r}")


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise LengthMismatch(f"descriptor lengths differ: {a.size} vs {b.size}")
    return a, b


# ---------------------------------------------------------------------------
# softargmax


def _weights(s, beta):
    s = np.asarray(s, dtype=float)
    if s.size == 0:
        raise ValueError("empty score map")
    return softmax(beta * s, axis=None).reshape(s.shape)


def softargmax(s, beta: float = 10.0):
    """Softmax-weighted centroid ``(x, y)`` = (column, row) of a score map."""
    w = _weights(s, beta)
    H, W = w.shape
    x = float(w.sum(axis=0) @ np.arange(W))
    y = float(w.sum(axis=1) @ np.arange(H))
    return x, y


def softargmax_grad(s, beta: float = 10.0):
    """Gradients of ``x`` and ``y`` with respect to every score entry."""
    w = _weights(s, beta)
    H, W = w.shape
    x, y = softargmax(s, beta)
    cols = np.arange(W)[None, :]
    rows = np.arange(H)[:, None]
    return beta * w * (cols - x), beta * w * (rows - y)


# ---------------------------------------------------------------------------
# descriptor losses


def loss_desc(pair: DescriptorPair, margin_c: float = 4.0) -> float:
    d = float(np.linalg.norm(pair.d_k - pair.d_l))
    if pair.relation == POSITIVE:
        return d
    return max(0.0, margin_c - d)


def loss_desc_grad(pair: DescriptorPair, margin_c: float = 4.0):
    """Gradient with respect to ``(d_k, d_l)``; undefined where the distance is 0."""
    diff = pair.d_k - pair.d_l
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        z = np.zeros_like(diff)
        return z, z
    g = diff / d
    if pair.relation == NEGATIVE:
        g = -g if d < margin_c else np.zeros_like(g)
    return g, -g


def loss_ori(d1, d2) -> float:
    a, b = _pair(d1, d2)
    return float(np.linalg.norm(a - b))


def loss_pair(d1, d2) -> float:
    a, b = _pair(d1, d2)
    return float(np.linalg.norm(a - b))


def l2_grad(d1, d2):
    a, b = _pair(d1, d2)
    diff = a - b
    n = float(np.linalg.norm(diff))
    g = diff / n if n > 0 else np.zeros_like(diff)
    return g, -g


loss_ori_grad = l2_grad
loss_pair_grad = l2_grad


# ---------------------------------------------------------------------------
# detector losses


def soft_maximum(s, beta: float = 1.0) -> float:
    """Scalar log-sum-exp soft maximum of a score map."""
    # max-shifted by hand: scipy's logsumexp costs ~0.2 ms per call on tiny maps
    z = beta * np.asarray(s, dtype=float)
    m = z.max()
    return float((m + np.log(np.exp(z - m).sum())) / beta)


def loss_class(score_maps, cfg: DetectorLossConfig = DetectorLossConfig()) -> float:
    if len(score_maps) != 4:
        raise ValueError("loss_class needs four score maps")
    total = 0.0
    for s, a, y in zip(score_maps, cfg.alphas, cfg.labels):
        h = max(0.0, 1.0 - soft_maximum(s, cfg.beta_class) * y)
        total += a * h * h
    return total


def loss_class_grad(score_maps, cfg: DetectorLossConfig = DetectorLossConfig()):
    grads = []
    for s, a, y in zip(score_maps, cfg.alphas, cfg.labels):
        h = max(0.0, 1.0 - soft_maximum(s, cfg.beta_class) * y)
        w = _weights(s, cfg.beta_class)
        grads.append(-2.0 * a * h * y * w)
    return grads


def loss_det(score_maps, d1, d2, cfg: DetectorLossConfig = DetectorLossConfig()) -> float:
    return cfg.gamma_balance * loss_class(score_maps, cfg) + loss_pair(d1, d2)


def loss_det_grad(score_maps, d1, d2, cfg: DetectorLossConfig = DetectorLossConfig()):
    """Gradients ``(maps, d1, d2)``."""
    gm = [cfg.gamma_balance * g for g in loss_class_grad(score_maps, cfg)]
    g1, g2 = loss_pair_grad(d1, d2)
    return gm, g1, g2


# ---------------------------------------------------------------------------
# finite-difference verification


def numeric_grad(f, x, step: float = 1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(x)
        flat[i] = old - step
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic, numeric, eps: float = 1e-12) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), eps)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def grad_check(f, grad, inputs, step: float = 1e-5) -> float:
    """Max relative error between ``grad(*inputs)`` and central differences of ``f``.

    ``f`` maps the list of input arrays to a scalar; ``grad`` returns one
    array per input (or a single array when there is one input).
    """
    inputs = [np.array(x, dtype=float) for x in inputs]
    analytic = grad(*inputs)
    if len(inputs) == 1 and isinstance(analytic, np.ndarray):
        analytic = [analytic]
    worst = 0.0
    for k, x in enumerate(inputs):
        def fk(v, k=k):
            args = list(inputs)
            args[k] = v
            return f(*args)

        worst = max(worst, relative_error(analytic[k], numeric_grad(fk, x, step)))
    return worst
