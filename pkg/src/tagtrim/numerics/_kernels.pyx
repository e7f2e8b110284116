# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused single-pass versions of the numpy reference
implementations in ``kernels_py``. Same math, same float64 contracts."""

from libc.math cimport erf, exp, sqrt, INFINITY

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_forward(double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = x[i] * 0.5 * (1.0 + erf(x[i] * INV_SQRT2))


def gelu_backward(double[::1] x, double[::1] gy, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double cdf, pdf
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        pdf = INV_SQRT2PI * exp(-0.5 * x[i] * x[i])
        out[i] = gy[i] * (cdf + x[i] * pdf)


def add_norm_forward(double[:, ::1] o, double[:, ::1] v, double gamma,
                     double beta, double eps, double[:, ::1] out,
                     double[:, ::1] xhat, double[::1] inv_std):
    cdef Py_ssize_t r, j, rows = o.shape[0], d = o.shape[1]
    cdef double mu, var, diff, istd
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += o[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = o[r, j] - mu
            var += diff * diff
        var /= d
        istd = 1.0 / sqrt(var + eps)
        inv_std[r] = istd
        for j in range(d):
            xhat[r, j] = (o[r, j] - mu) * istd
            out[r, j] = v[r, j] + gamma * xhat[r, j] + beta


def add_norm_backward(double[:, ::1] g, double[:, ::1] xhat,
                      double[::1] inv_std, double gamma, double[:, ::1] go):
    cdef Py_ssize_t r, j, rows = g.shape[0], d = g.shape[1]
    cdef double ggamma = 0.0, gbeta = 0.0, row_mean, row_proj, gx
    for r in range(rows):
        row_mean = 0.0
        row_proj = 0.0
        for j in range(d):
            ggamma += g[r, j] * xhat[r, j]
            gbeta += g[r, j]
            gx = g[r, j] * gamma
            row_mean += gx
            row_proj += gx * xhat[r, j]
        row_mean /= d
        row_proj /= d
        for j in range(d):
            go[r, j] = inv_std[r] * (g[r, j] * gamma - row_mean
                                     - xhat[r, j] * row_proj)
    return ggamma, gbeta


def weighted_softmax_forward(double[:, ::1] scores, double[:, ::1] weights,
                             double[:, ::1] alpha, double[:, ::1] coeff):
    cdef Py_ssize_t r, j, rows = scores.shape[0], n = scores.shape[1]
    cdef double row_max, denom, u
    for r in range(rows):
        row_max = -INFINITY
        for j in range(n):
            if weights[r, j] > 0.0 and scores[r, j] > row_max:
                row_max = scores[r, j]
        denom = 0.0
        for j in range(n):
            if weights[r, j] > 0.0:
                u = exp(scores[r, j] - row_max)
                coeff[r, j] = u
                denom += weights[r, j] * u
            else:
                coeff[r, j] = 0.0
        for j in range(n):
            coeff[r, j] /= denom
            alpha[r, j] = weights[r, j] * coeff[r, j]


def weighted_softmax_backward(double[:, ::1] g, double[:, ::1] alpha,
                              double[:, ::1] coeff, double[:, ::1] gscores,
                              double[:, ::1] gweights):
    cdef Py_ssize_t r, j, rows = g.shape[0], n = g.shape[1]
    cdef double row_dot, centered
    for r in range(rows):
        row_dot = 0.0
        for j in range(n):
            row_dot += g[r, j] * alpha[r, j]
        for j in range(n):
            centered = g[r, j] - row_dot
            gscores[r, j] = alpha[r, j] * centered
            gweights[r, j] = coeff[r, j] * centered


def softmax_forward(double[:, ::1] x, double[:, ::1] out):
    cdef Py_ssize_t r, j, rows = x.shape[0], n = x.shape[1]
    cdef double row_max, denom
    for r in range(rows):
        row_max = x[r, 0]
        for j in range(1, n):
            if x[r, j] > row_max:
                row_max = x[r, j]
        denom = 0.0
        for j in range(n):
            out[r, j] = exp(x[r, j] - row_max)
            denom += out[r, j]
        for j in range(n):
            out[r, j] /= denom


def softmax_backward(double[:, ::1] g, double[:, ::1] s, double[:, ::1] out):
    cdef Py_ssize_t r, j, rows = g.shape[0], n = g.shape[1]
    cdef double row_dot
    for r in range(rows):
        row_dot = 0.0
        for j in range(n):
            row_dot += g[r, j] * s[r, j]
        for j in range(n):
            out[r, j] = s[r, j] * (g[r, j] - row_dot)
