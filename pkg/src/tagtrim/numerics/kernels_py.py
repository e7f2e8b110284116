"""Pure-numpy kernels for the hot forward/backward primitives.

These are the reference implementations. A compiled drop-in replacement
lives in ``_kernels.pyx``; ``backend`` picks whichever is available at
import time. All kernels take and return float64 arrays and are pure
functions of their inputs.

Shape conventions: ``gelu_*`` accept any shape; ``add_norm_*`` and the
softmax kernels normalize over the last axis.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward(x):
    """x * Phi(x) with the exact Gaussian CDF (no tanh approximation)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, gy):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return gy * (cdf + x * phi)


def add_norm_forward(o, v, gamma, beta, eps, use_sqrt=True):
    """Residual add-and-normalize: v + gamma * norm(o) + beta.

    Normalization statistics are per row (last axis, population variance).
    ``gamma``/``beta`` are arrays of shape () or (D,). ``use_sqrt=False``
    divides by (var + eps) directly instead of its square root; it exists
    only so the two conventions can be compared in tests.

    Returns (out, xhat, inv_std) where xhat is the normalized part before
    scaling and inv_std the per-row reciprocal deviation, both needed by
    the backward pass.
    """
    mu = o.mean(axis=-1, keepdims=True)
    var = o.var(axis=-1, keepdims=True)
    denom = var + eps
    if use_sqrt:
        denom = np.sqrt(denom)
    inv_std = 1.0 / denom
    xhat = (o - mu) * inv_std
    out = v + gamma * xhat + beta
    return out, xhat, inv_std


def add_norm_backward(g, xhat, inv_std, gamma):
    """Backward of add_norm_forward (sqrt convention only).

    Returns (go, gv, ggamma, gbeta); ggamma/gbeta are summed to gamma's
    shape (scalar or per-dimension).
    """
    d = xhat.shape[-1]
    gv = g
    if np.ndim(gamma) == 0:
        ggamma = np.sum(g * xhat)
        gbeta = np.sum(g)
    else:
        lead = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xhat, axis=lead)
        gbeta = np.sum(g, axis=lead)
    gx = g * gamma
    row_mean = gx.mean(axis=-1, keepdims=True)
    row_proj = (gx * xhat).mean(axis=-1, keepdims=True)
    go = inv_std * (gx - row_mean - xhat * row_proj)
    return go, gv, ggamma, gbeta


def weighted_softmax_forward(scores, weights):
    """Row softmax of exp(scores) reweighted by nonnegative edge weights.

    alpha_ij = w_ij * exp(a_ij) / sum_k w_ik * exp(a_ik), rows over the
    last axis. Entries with w == 0 contribute nothing and get alpha == 0
    exactly; binary weights reduce to hard masking. Every row must have at
    least one positive weight.

    Returns (alpha, coeff) with coeff_ij = exp(a_ij - m_i) / S_i, the
    bare softmax coefficient needed for the weight gradient (coeff is 0
    where w == 0).
    """
    valid = weights > 0.0
    shifted = np.where(valid, scores, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    u = np.exp(np.where(valid, scores - row_max, -np.inf))
    z = weights * u
    denom = z.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        # A row with no positive weight divides 0/0; the NaNs are the
        # caller's signal to reject the row.
        alpha = z / denom
        coeff = u / denom
    return alpha, coeff


def weighted_softmax_backward(g, alpha, coeff):
    """Backward of weighted_softmax_forward.

    Returns (gscores, gweights). Weight gradients are exact where w > 0
    and reported as 0 on w == 0 entries (hard-masked edges are constants).
    """
    row_dot = np.sum(g * alpha, axis=-1, keepdims=True)
    centered = g - row_dot
    gscores = alpha * centered
    gweights = coeff * centered
    return gscores, gweights


def softmax_forward(x):
    """Plain row softmax over the last axis, max-subtracted for stability."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(g, s):
    row_dot = np.sum(g * s, axis=-1, keepdims=True)
    return s * (g - row_dot)
