"""Stateless numeric primitives: softmax, GELU, add-and-norm, cross-entropy,
and a central finite-difference gradient used as the verification oracle.

All functions operate on plain float64 numpy arrays (or scalars) and raise
``NumericError`` on non-finite inputs rather than propagating NaN/Inf.
"""

import math

import numpy as np

from ..errors import NumericError
from . import backend

LOG_FLOOR = 1e-12


def _as_finite_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def softmax_row(v):
    """Probability-simplex projection of one real vector.

    Max-subtracted for stability; output sums to 1 and preserves the input
    ordering.
    """
    arr = _as_finite_array(v, "softmax input")
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("softmax_row expects a non-empty 1-D vector")
    return backend.softmax(arr)


def gelu(x):
    """Exact-CDF GELU: x * Phi(x), where Phi is the standard normal CDF."""
    if np.isscalar(x) or np.ndim(x) == 0:
        xf = float(x)
        if not math.isfinite(xf):
            raise NumericError("gelu input is non-finite")
        return xf * 0.5 * (1.0 + math.erf(xf / math.sqrt(2.0)))
    arr = _as_finite_array(x, "gelu input")
    return backend.gelu(arr)


def layer_norm(o, v, gamma, beta, eps, use_sqrt=True):
    """Residual add-and-norm of one vector: v + gamma * norm(o) + beta.

    ``gamma`` and ``beta`` are scalars; normalization uses the population
    variance of ``o``. With ``use_sqrt=False`` the normalized part divides
    by (var + eps) instead of sqrt(var + eps); that variant exists only for
    side-by-side comparison in tests and is never used by the model.
    """
    o_arr = _as_finite_array(o, "layer_norm input")
    v_arr = _as_finite_array(v, "layer_norm residual")
    if o_arr.ndim != 1 or o_arr.size == 0:
        raise ValueError("layer_norm expects non-empty 1-D vectors")
    if o_arr.shape != v_arr.shape:
        raise ValueError(
            f"layer_norm length mismatch: {o_arr.shape} vs {v_arr.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm requires eps > 0")
    out, _, _ = backend.add_norm(
        o_arr, v_arr, np.float64(gamma), np.float64(beta), eps, use_sqrt=use_sqrt
    )
    return out


def cross_entropy(p, c):
    """Mean negative log-likelihood of one-hot targets ``c`` under rows of ``p``.

    Each row of ``p`` must sum to 1 within 1e-6 and each row of ``c`` must be
    one-hot. The log argument is clamped at ``LOG_FLOOR`` so a saturated
    distribution cannot produce an infinite loss.
    """
    p_arr = _as_finite_array(p, "cross_entropy probabilities")
    c_arr = _as_finite_array(c, "cross_entropy targets")
    if p_arr.ndim != 2 or c_arr.shape != p_arr.shape:
        raise ValueError("cross_entropy expects matching M x K matrices")
    row_sums = p_arr.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("cross_entropy: a probability row does not sum to 1")
    if np.any(p_arr < 0):
        raise ValueError("cross_entropy: negative probability")
    is_one_hot = np.all(np.isin(c_arr, (0.0, 1.0))) and np.all(
        c_arr.sum(axis=1) == 1.0
    )
    if not is_one_hot:
        raise ValueError("cross_entropy: target rows must be one-hot")
    picked = (p_arr * c_arr).sum(axis=1)
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of an array.

    (f(x + h e_k) - f(x - h e_k)) / (2h) per coordinate; the independent
    oracle every analytic gradient in this package is checked against.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad requires h > 0")
    x_arr = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x_arr)
    flat = x_arr.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = float(f(x_arr))
        flat[k] = orig - h
        f_minus = float(f(x_arr))
        flat[k] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("finite_diff_grad: function value is non-finite")
        gflat[k] = (f_plus - f_minus) / (2.0 * h)
    return grad
