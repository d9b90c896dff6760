"""Dense float64 kernels with paired forward/backward passes.

Every differentiable kernel here has a ``*_backward`` companion that maps an
upstream gradient to input gradients. ``finite_difference_gradient`` is the
independent oracle used to check them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

ENTROPY_EPS = 1e-10


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    analytic: float
    numeric: float
    rel_error: float


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


# ---------------------------------------------------------------------------
# cosine
# ---------------------------------------------------------------------------


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or u.size < 1:
        raise ValueError(f"cosine needs two equal-length vectors, got {u.shape} and {v.shape}")
    nu = np.sqrt(u @ u)
    nv = np.sqrt(v @ v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float((u @ v) / (nu * nv))


def cosine_backward(u, v, grad: float = 1.0):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.sqrt(u @ u)
    nv = np.sqrt(v @ v)
    if nu == 0.0 or nv == 0.0:
        return np.zeros_like(u), np.zeros_like(v)
    c = (u @ v) / (nu * nv)
    du = grad * (v / (nu * nv) - c * u / (nu * nu))
    dv = grad * (u / (nu * nv) - c * v / (nv * nv))
    return du, dv


def unit_rows(x: np.ndarray):
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = x / safe[:, None]
    unit[norms == 0.0] = 0.0
    return unit, norms


def cosine_matrix(a: np.ndarray, b: np.ndarray):
    """Row-by-row cosine similarities of ``a`` (m x d) against ``b`` (n x d).

    Returns the m x n matrix and a cache for :func:`cosine_matrix_backward`.
    """
    ua, na = unit_rows(a)
    ub, nb = unit_rows(b)
    return ua @ ub.T, (ua, na, ub, nb)


def _unit_backward(unit, norms, d_unit):
    safe = np.where(norms > 0.0, norms, 1.0)
    proj = np.einsum("ij,ij->i", d_unit, unit)
    dx = (d_unit - unit * proj[:, None]) / safe[:, None]
    dx[norms == 0.0] = 0.0
    return dx


def cosine_matrix_backward(cache, d_sim: np.ndarray):
    ua, na, ub, nb = cache
    da = _unit_backward(ua, na, d_sim @ ub)
    db = _unit_backward(ub, nb, d_sim.T @ ua)
    return da, db


# ---------------------------------------------------------------------------
# pearson
# ---------------------------------------------------------------------------


def pearson(x, y) -> float:
    """Sample Pearson correlation. Zero-variance input gives 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors with n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def pearson_backward(x, y, grad: float = 1.0):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        return np.zeros_like(x), np.zeros_like(y)
    r = (xc @ yc) / (sx * sy)
    # both terms are already mean-free, so the centering projection is a no-op
    dx = grad * (yc / (sx * sy) - r * xc / (sx * sx))
    dy = grad * (xc / (sx * sy) - r * yc / (sy * sy))
    return dx, dy


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    inner = (probs * d_probs).sum(axis=axis, keepdims=True)
    return probs * (d_probs - inner)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------


def histogram_probs(values, bins: int = 100) -> np.ndarray:
    """Bin frequencies of values in [0, 1] over ``bins`` equal-width bins.

    Bin j holds [j/bins, (j+1)/bins); the value 1.0 falls in the last bin.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("histogram of an empty set")
    if np.any(v < 0.0) or np.any(v > 1.0) or not np.all(np.isfinite(v)):
        raise ValueError("histogram values must lie in [0, 1]")
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins) / v.size


def entropy(probs, eps: float = ENTROPY_EPS) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(-(p * np.log(p + eps)).sum())


def histogram_entropy(values, bins: int = 100, eps: float = ENTROPY_EPS) -> float:
    """Natural-log entropy of the ``bins``-bin histogram of ``values``."""
    return entropy(histogram_probs(values, bins), eps)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    loss: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss`` for every scalar in ``params``.

    ``params`` is perturbed in place and restored. Entries whose perturbed
    loss is not finite come back as NaN.
    """
    grads = {}
    for name, arr in params.items():
        g = np.empty(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = loss(params)
            flat[k] = orig - step
            fm = loss(params)
            flat[k] = orig
            if np.isfinite(fp) and np.isfinite(fm):
                gflat[k] = (fp - fm) / (2.0 * step)
            else:
                gflat[k] = np.nan
        grads[name] = g
    return grads
