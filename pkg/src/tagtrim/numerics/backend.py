"""Kernel backend selection: compiled extension if importable, numpy otherwise.

Set ``TAGTRIM_PURE_PYTHON=1`` to force the numpy kernels even when the
compiled extension is installed. ``benchmarks/bench_kernels.py`` compares
the two.
"""

import os

import numpy as np

from . import kernels_py

if os.environ.get("TAGTRIM_PURE_PYTHON", "") not in ("", "0"):
    _compiled = None
else:
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

HAVE_COMPILED = _compiled is not None


def active_backend():
    return "compiled" if HAVE_COMPILED else "python"


def _rows(x):
    """View an (..., n) array as C-contiguous 2-D rows."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1]) if arr.ndim != 2 else arr


def gelu(x):
    if _compiled is None:
        return kernels_py.gelu_forward(x)
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    _compiled.gelu_forward(arr.reshape(-1), out.reshape(-1))
    return out


def gelu_grad(x, gy):
    if _compiled is None:
        return kernels_py.gelu_backward(x, gy)
    arr = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(arr)
    _compiled.gelu_backward(arr.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


def add_norm(o, v, gamma, beta, eps, use_sqrt=True):
    if _compiled is None or not use_sqrt or np.ndim(gamma) != 0:
        # Compiled path covers the model's default: sqrt convention, scalar
        # gamma/beta. Per-dimension scales are off the hot path.
        return kernels_py.add_norm_forward(o, v, gamma, beta, eps, use_sqrt=use_sqrt)
    o_arr = np.ascontiguousarray(o, dtype=np.float64)
    v_arr = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty_like(o_arr)
    xhat = np.empty_like(o_arr)
    lead = o_arr.size // o_arr.shape[-1]
    inv_std = np.empty(lead, dtype=np.float64)
    _compiled.add_norm_forward(
        _rows(o_arr), _rows(v_arr), float(gamma), float(beta), float(eps),
        out.reshape(lead, -1), xhat.reshape(lead, -1), inv_std,
    )
    return out, xhat, inv_std.reshape(o_arr.shape[:-1] + (1,))


def add_norm_grad(g, xhat, inv_std, gamma):
    if _compiled is None or np.ndim(gamma) != 0:
        return kernels_py.add_norm_backward(g, xhat, inv_std, gamma)
    g_arr = np.ascontiguousarray(g, dtype=np.float64)
    xhat_arr = np.ascontiguousarray(xhat, dtype=np.float64)
    go = np.empty_like(g_arr)
    lead = g_arr.size // g_arr.shape[-1]
    sums = _compiled.add_norm_backward(
        _rows(g_arr), _rows(xhat_arr),
        np.ascontiguousarray(inv_std, dtype=np.float64).reshape(-1),
        float(gamma), go.reshape(lead, -1),
    )
    ggamma, gbeta = sums
    return go, g_arr, np.float64(ggamma), np.float64(gbeta)


def weighted_softmax(scores, weights):
    if _compiled is None:
        return kernels_py.weighted_softmax_forward(scores, weights)
    s_arr = np.ascontiguousarray(scores, dtype=np.float64)
    w_arr = np.ascontiguousarray(weights, dtype=np.float64)
    alpha = np.empty_like(s_arr)
    coeff = np.empty_like(s_arr)
    n = s_arr.shape[-1]
    _compiled.weighted_softmax_forward(
        s_arr.reshape(-1, n), w_arr.reshape(-1, n),
        alpha.reshape(-1, n), coeff.reshape(-1, n),
    )
    return alpha, coeff


def weighted_softmax_grad(g, alpha, coeff):
    if _compiled is None:
        return kernels_py.weighted_softmax_backward(g, alpha, coeff)
    g_arr = np.ascontiguousarray(g, dtype=np.float64)
    a_arr = np.ascontiguousarray(alpha, dtype=np.float64)
    c_arr = np.ascontiguousarray(coeff, dtype=np.float64)
    gs = np.empty_like(g_arr)
    gw = np.empty_like(g_arr)
    n = g_arr.shape[-1]
    _compiled.weighted_softmax_backward(
        g_arr.reshape(-1, n), a_arr.reshape(-1, n), c_arr.reshape(-1, n),
        gs.reshape(-1, n), gw.reshape(-1, n),
    )
    return gs, gw


def softmax(x):
    if _compiled is None:
        return kernels_py.softmax_forward(x)
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    n = arr.shape[-1]
    _compiled.softmax_forward(arr.reshape(-1, n), out.reshape(-1, n))
    return out


def softmax_grad(g, s):
    if _compiled is None:
        return kernels_py.softmax_backward(g, s)
    g_arr = np.ascontiguousarray(g, dtype=np.float64)
    s_arr = np.ascontiguousarray(s, dtype=np.float64)
    out = np.empty_like(g_arr)
    n = g_arr.shape[-1]
    _compiled.softmax_backward(g_arr.reshape(-1, n), s_arr.reshape(-1, n), out.reshape(-1, n))
    return out
