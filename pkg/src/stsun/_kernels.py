"""Hot elementwise/row kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``STSUN_NUMBA=0`` to force the
numpy path; numba is used otherwise whenever it imports. Both paths are always
importable under their explicit names (``*_numpy`` / ``*_numba``) so the
benchmark and the agreement tests can call either one directly.

All kernels take C-contiguous float64 arrays. Row kernels operate on 2-D
``(rows, d)`` views; callers reshape.
"""

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("STSUN_NUMBA", "1") != "0"
BACKEND = "numba" if USE_NUMBA else "numpy"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy reference path


def softmax_rows_numpy(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad_numpy(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layernorm_rows_numpy(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_rows_grad_numpy(g, xhat, rstd, gamma):
    gxhat = g * gamma
    d = xhat.shape[1]
    gx = rstd[:, None] * (
        gxhat
        - gxhat.sum(axis=1, keepdims=True) / d
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True) / d
    )
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_numpy(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2))


def gelu_grad_numpy(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def gather_rows_numpy(x, idx):
    """x: (n, L, d), idx: (m,) -> (n, m, d)."""
    return x[:, idx, :]


def scatter_rows_numpy(y, idx, weights, length):
    """Weighted scatter-add of rows: out[:, idx[j]] += weights[j] * y[:, j]."""
    n, m, d = y.shape
    out = np.zeros((length, n * d))
    src = (y * weights[None, :, None]).transpose(1, 0, 2).reshape(m, n * d)
    np.add.at(out, idx, src)
    return np.ascontiguousarray(out.reshape(length, n, d).transpose(1, 0, 2))


# --------------------------------------------------------------------------
# numba path

if NUMBA_AVAILABLE:

    @numba.njit(cache=True)
    def softmax_rows_numba(x):
        rows, d = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, d):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(d):
                out[r, j] *= inv
        return out

    @numba.njit(cache=True)
    def softmax_rows_grad_numba(y, g):
        rows, d = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            s = 0.0
            for j in range(d):
                s += g[r, j] * y[r, j]
            for j in range(d):
                out[r, j] = y[r, j] * (g[r, j] - s)
        return out

    @numba.njit(cache=True)
    def layernorm_rows_numba(x, gamma, beta, eps):
        rows, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[r, j] - mu
                var += c * c
            var /= d
            inv = 1.0 / math.sqrt(var + eps)
            rstd[r] = inv
            for j in range(d):
                h = (x[r, j] - mu) * inv
                xhat[r, j] = h
                out[r, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def layernorm_rows_grad_numba(g, xhat, rstd, gamma):
        rows, d = g.shape
        gx = np.empty_like(g)
        ggamma = np.zeros(d)
        gbeta = np.zeros(d)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gh = g[r, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[r, j]
                ggamma[j] += g[r, j] * xhat[r, j]
                gbeta[j] += g[r, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                gx[r, j] = rstd[r] * (g[r, j] * gamma[j] - s1 - xhat[r, j] * s2)
        return gx, ggamma, gbeta

    @numba.njit(cache=True)
    def _gelu_flat(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
        return out

    @numba.njit(cache=True)
    def _gelu_grad_flat(x, g):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
            pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
            out[i] = g[i] * (cdf + v * pdf)
        return out

    def gelu_numba(x):
        return _gelu_flat(x.reshape(-1)).reshape(x.shape)

    def gelu_grad_numba(x, g):
        return _gelu_grad_flat(x.reshape(-1), g.reshape(-1)).reshape(x.shape)

    @numba.njit(cache=True)
    def gather_rows_numba(x, idx):
        n, _, d = x.shape
        m = idx.shape[0]
        out = np.empty((n, m, d))
        for b in range(n):
            for j in range(m):
                src = idx[j]
                for k in range(d):
                    out[b, j, k] = x[b, src, k]
        return out

    @numba.njit(cache=True)
    def scatter_rows_numba(y, idx, weights, length):
        n, m, d = y.shape
        out = np.zeros((n, length, d))
        for b in range(n):
            for j in range(m):
                dst = idx[j]
                w = weights[j]
                for k in range(d):
                    out[b, dst, k] += w * y[b, j, k]
        return out


if USE_NUMBA:
    softmax_rows = softmax_rows_numba
    softmax_rows_grad = softmax_rows_grad_numba
    layernorm_rows = layernorm_rows_numba
    layernorm_rows_grad = layernorm_rows_grad_numba
    gelu = gelu_numba
    gelu_grad = gelu_grad_numba
    gather_rows = gather_rows_numba
    scatter_rows = scatter_rows_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_grad = softmax_rows_grad_numpy
    layernorm_rows = layernorm_rows_numpy
    layernorm_rows_grad = layernorm_rows_grad_numpy
    gelu = gelu_numpy
    gelu_grad = gelu_grad_numpy
    gather_rows = gather_rows_numpy
    scatter_rows = scatter_rows_numpy
