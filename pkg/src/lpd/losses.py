"""Ranking, de-correlation and entropy-gated multi-space losses.

All functions take similarity matrices with texts on rows and videos on
columns, positives on the diagonal, and return analytic gradients w.r.t.
those matrices alongside the values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import ENTROPY_EPS, entropy, histogram_probs, softmax

log = logging.getLogger(__name__)

DCL_MODES = ("partial", "full", "off")
MTRL_MODES = ("ef-gated", "plain-sum")
GATE_COMPARISONS = ("ge", "gt")


@dataclass
class LossConfig:
    margin: float = 0.2
    dcl_mode: str = "partial"
    dcl_weight: float = 1.0
    mtrl_mode: str = "ef-gated"
    entropy_bins: int = 100
    entropy_eps: float = ENTROPY_EPS
    gate_comparison: str = "ge"

    def validate(self, batch_size: int | None = None):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.dcl_mode not in DCL_MODES:
            raise ValueError(f"dcl_mode must be one of {DCL_MODES}")
        if self.mtrl_mode not in MTRL_MODES:
            raise ValueError(f"mtrl_mode must be one of {MTRL_MODES}")
        if self.gate_comparison not in GATE_COMPARISONS:
            raise ValueError(f"gate_comparison must be one of {GATE_COMPARISONS}")
        if self.entropy_bins < 2:
            raise ValueError("entropy_bins must be >= 2")
        if batch_size is not None:
            if batch_size < 2:
                raise ValueError("a batch needs at least 2 pairs to have negatives")
            if self.dcl_mode != "off" and batch_size < 4:
                raise ValueError("de-correlation needs a batch of at least 4 pairs")


# ---------------------------------------------------------------------------
# ITRL
# ---------------------------------------------------------------------------


def hardest_negatives(sim: np.ndarray) -> np.ndarray:
    """Column of the largest off-diagonal entry per row (lowest index on ties)."""
    masked = sim.copy()
    np.fill_diagonal(masked, -np.inf)
    return masked.argmax(axis=1)


def itrl(sim: np.ndarray, margin: float = 0.2):
    """Hardest-negative triplet loss per text row and its batch mean."""
    b = sim.shape[0]
    if b < 2 or sim.shape != (b, b):
        raise ValueError("ITRL needs a square similarity matrix with b >= 2")
    rows = np.arange(b)
    neg = hardest_negatives(sim)
    per_row = np.maximum(0.0, margin + sim[rows, neg] - sim[rows, rows])
    return per_row, float(per_row.mean())


def itrl_grad(sim: np.ndarray, margin: float = 0.2) -> np.ndarray:
    """Gradient of the batch-mean ITRL; zero at the hinge."""
    b = sim.shape[0]
    rows = np.arange(b)
    neg = hardest_negatives(sim)
    active = (margin + sim[rows, neg] - sim[rows, rows]) > 0.0
    grad = np.zeros_like(sim)
    grad[rows[active], neg[active]] += 1.0 / b
    grad[rows[active], rows[active]] -= 1.0 / b
    return grad


# ---------------------------------------------------------------------------
# de-correlation
# ---------------------------------------------------------------------------


def _row_pearson(x, y, mask):
    n = mask.sum(axis=1, keepdims=True)
    xc = (x - (x * mask).sum(axis=1, keepdims=True) / n) * mask
    yc = (y - (y * mask).sum(axis=1, keepdims=True) / n) * mask
    sx = np.sqrt((xc * xc).sum(axis=1))
    sy = np.sqrt((yc * yc).sum(axis=1))
    ok = (sx > 0.0) & (sy > 0.0)
    denom = np.where(ok, sx * sy, 1.0)
    r = np.where(ok, (xc * yc).sum(axis=1) / denom, 0.0)
    return r, xc, yc, np.where(ok, sx, 1.0), np.where(ok, sy, 1.0), ok


def dcl_pair(m1: np.ndarray, m2: np.ndarray, mode: str = "partial"):
    """Mean absolute row-wise Pearson correlation between two spaces.

    ``partial`` correlates only the b-1 negatives of each row; the positive is
    left out of the statistic altogether. ``full`` uses all b entries.
    Returns ``(value, d_m1, d_m2)``.
    """
    b = m1.shape[0]
    if m1.shape != (b, b) or m2.shape != (b, b):
        raise ValueError("de-correlation needs two b x b matrices")
    if b < 4:
        raise ValueError("de-correlation needs b >= 4")
    if mode == "partial":
        mask = 1.0 - np.eye(b)
    elif mode == "full":
        mask = np.ones((b, b))
    else:
        raise ValueError(f"unknown de-correlation mode {mode!r}")
    r, xc, yc, sx, sy, ok = _row_pearson(m1, m2, mask)
    value = float(np.abs(r).mean())
    # sign(0) = 0 is the subgradient at the kink of |r|
    coef = (np.sign(r) * ok / b)[:, None]
    d1 = coef * (yc / (sx * sy)[:, None] - r[:, None] * xc / (sx * sx)[:, None])
    d2 = coef * (xc / (sx * sy)[:, None] - r[:, None] * yc / (sy * sy)[:, None])
    return value, d1, d2


def dcl_all(spaces: np.ndarray, mode: str = "partial"):
    """Mean of :func:`dcl_pair` over every unordered pair of spaces.

    Returns ``(value, grads)`` with ``grads`` shaped like ``spaces``.
    """
    k, b = spaces.shape[0], spaces.shape[1]
    grads = np.zeros_like(spaces)
    if mode == "off":
        return 0.0, grads
    if mode not in ("partial", "full"):
        raise ValueError(f"unknown de-correlation mode {mode!r}")
    if k < 2:
        log.warning("de-correlation over a single space is 0")
        return 0.0, grads
    if b < 4:
        raise ValueError("de-correlation needs b >= 4")
    mask = 1.0 - np.eye(b) if mode == "partial" else np.ones((b, b))
    n = mask.sum(axis=1)[None, :, None]
    c = (spaces - (spaces * mask).sum(axis=2, keepdims=True) / n) * mask
    sd = np.sqrt((c * c).sum(axis=2))  # K x b
    ok = sd > 0.0
    sd = np.where(ok, sd, 1.0)
    both = ok[:, None, :] & ok[None, :, :]
    denom = sd[:, None, :] * sd[None, :, :]
    r = np.where(both, np.einsum("mij,nij->mni", c, c) / denom, 0.0)  # K x K x b
    n_pairs = k * (k - 1) // 2
    off = ~np.eye(k, dtype=bool)
    value = float(np.abs(r)[off].sum() / 2.0 / (b * n_pairs))
    coef = np.sign(r) * off[:, :, None] / (b * n_pairs)
    grads = np.einsum("mni,nij->mij", coef / denom, c)
    grads -= ((coef * r).sum(axis=1) / (sd * sd))[:, :, None] * c
    return value, grads


# ---------------------------------------------------------------------------
# entropy gating
# ---------------------------------------------------------------------------


@dataclass
class EntropyReport:
    entropies: np.ndarray
    weights: np.ndarray
    gates: np.ndarray  # bool per space

    @property
    def bitmask(self) -> int:
        return sum(1 << s for s, g in enumerate(self.gates) if g)


def minmax_columns(x: np.ndarray) -> np.ndarray:
    """Scale each column to [0, 1] over the rows; constant columns map to 0."""
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0.0, span, 1.0)
    return np.clip(np.where(span > 0.0, (x - lo) / safe, 0.0), 0.0, 1.0)


def gate(weights: np.ndarray, comparison: str = "ge") -> np.ndarray:
    threshold = 1.0 / len(weights)
    if comparison == "ge":
        return weights >= threshold
    if comparison == "gt":
        return weights > threshold
    raise ValueError(f"unknown gate comparison {comparison!r}")


def weights_from_entropies(entropies, comparison: str = "ge") -> EntropyReport:
    h = np.asarray(entropies, dtype=np.float64)
    w = softmax(np.tanh(h))
    return EntropyReport(h, w, gate(w, comparison))


def entropy_weights(anchors: list[np.ndarray], config: LossConfig = LossConfig()) -> EntropyReport:
    """Per-space histogram entropy of min-max scaled embeddings, then softmax(tanh(H)).

    ``anchors`` holds one b x d embedding matrix per space.
    """
    h = [
        entropy(histogram_probs(minmax_columns(a), config.entropy_bins), config.entropy_eps)
        for a in anchors
    ]
    return weights_from_entropies(h, config.gate_comparison)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    value: float
    itrl: np.ndarray  # per-space batch means, ungated
    mtrl: float  # gated (or plain) sum of per-space ITRL
    dcl: float
    report: EntropyReport
    included: np.ndarray  # bool per space, the spaces whose ITRL counted
    grad: np.ndarray  # d value / d spaces, K x b x b

    @property
    def bitmask(self) -> int:
        return sum(1 << s for s, g in enumerate(self.included) if g)


def total_loss(spaces: np.ndarray, anchors: list[np.ndarray], config: LossConfig) -> LossResult:
    """Multi-space ranking loss plus weighted de-correlation.

    Entropy gates select which spaces' ITRL terms count; they are constants
    for the gradient. De-correlation always covers every space.
    """
    k = spaces.shape[0]
    report = entropy_weights(anchors, config)
    if config.mtrl_mode == "plain-sum":
        include = np.ones(k, dtype=bool)
    else:
        include = report.gates
    per_space = np.empty(k)
    grad = np.zeros_like(spaces)
    for s in range(k):
        per_space[s] = itrl(spaces[s], config.margin)[1]
        if include[s]:
            grad[s] += itrl_grad(spaces[s], config.margin)
    mtrl = float(per_space[include].sum())
    dcl, dcl_grad = dcl_all(spaces, config.dcl_mode)
    if config.dcl_mode != "off":
        grad += config.dcl_weight * dcl_grad
    value = mtrl + config.dcl_weight * dcl
    return LossResult(value, per_space, mtrl, dcl, report, include, grad)
