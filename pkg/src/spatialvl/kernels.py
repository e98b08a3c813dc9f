"""Row-wise numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``<name>_np`` (vectorised numpy) and
``<name>_nb`` (numba ``@njit`` loops). The unsuffixed name dispatches to the
numba version unless numba is missing or the environment variable
``SPATIALVL_NUMBA`` is set to ``0`` before import.

All kernels take C-contiguous 2-D float64 arrays; callers reshape.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("SPATIALVL_NUMBA", "1") != "0"

_GELU_C = math.sqrt(2.0 / math.pi)


def _njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# layer norm
# --------------------------------------------------------------------------


def layernorm_forward_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_backward_np(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    dx = rstd[:, None] * (
        g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


@_njit
def layernorm_forward_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            c = x[i, j] - m
            v += c * c
        r = 1.0 / math.sqrt(v / d + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - m) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@_njit
def layernorm_backward_nb(dy, xhat, rstd, gamma):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# softmax over the last axis
# --------------------------------------------------------------------------


def softmax_forward_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


@_njit
def softmax_forward_nb(x):
    n, k = x.shape
    y = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(k):
            e = math.exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        for j in range(k):
            y[i, j] /= s
    return y


@_njit
def softmax_backward_nb(y, dy):
    n, k = y.shape
    dx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += dy[i, j] * y[i, j]
        for j in range(k):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


# --------------------------------------------------------------------------
# GELU, tanh approximation
# --------------------------------------------------------------------------


def gelu_forward_np(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward_np(x, dy):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x) * (1.0 - t * t)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


@_njit
def _tanh_nb(z):
    # exp form is about twice as fast as math.tanh here; saturates cleanly
    return 1.0 - 2.0 / (math.exp(2.0 * z) + 1.0)


@_njit
def gelu_forward_nb(x):
    n, k = x.shape
    y = np.empty_like(x)
    for i in range(n):
        for j in range(k):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + _tanh_nb(_GELU_C * (v + 0.044715 * v * v * v)))
    return y


@_njit
def gelu_backward_nb(x, dy):
    n, k = x.shape
    dx = np.empty_like(x)
    for i in range(n):
        for j in range(k):
            v = x[i, j]
            t = _tanh_nb(_GELU_C * (v + 0.044715 * v * v * v))
            dt = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v) * (1.0 - t * t)
            dx[i, j] = dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return dx


# --------------------------------------------------------------------------
# embedding-table gradients and the optimiser update
# --------------------------------------------------------------------------


def scatter_add_np(table, idx, rows):
    """table[idx[r]] += rows[r], in place, repeated indices accumulate."""
    np.add.at(table, idx, rows)


@_njit
def scatter_add_nb(table, idx, rows):
    for r in range(idx.shape[0]):
        t = idx[r]
        for j in range(rows.shape[1]):
            table[t, j] += rows[r, j]


def adamw_update_np(p, g, m, v, lr, b1, b2, c1, c2, eps, decay):
    """One decoupled-weight-decay Adam step on flat arrays, in place."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p *= decay
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@_njit
def adamw_update_nb(p, g, m, v, lr, b1, b2, c1, c2, eps, decay):
    for i in range(p.shape[0]):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


# --------------------------------------------------------------------------
# pairwise box metrics, boxes as rows (x1, y1, x2, y2)
# --------------------------------------------------------------------------


def _pairwise_terms_np(a, b):
    ax1, ay1, ax2, ay2 = (a[:, k][:, None] for k in range(4))
    bx1, by1, bx2, by2 = (b[:, k][None, :] for k in range(4))
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (np.maximum(ax2, bx2) - np.minimum(ax1, bx1)) * (
        np.maximum(ay2, by2) - np.minimum(ay1, by1)
    )
    return inter, union, hull


def pairwise_iou_np(a, b):
    inter, union, _ = _pairwise_terms_np(a, b)
    return inter / union


def pairwise_giou_np(a, b):
    inter, union, hull = _pairwise_terms_np(a, b)
    return inter / union - (hull - union) / hull


@_njit
def _pair_terms_nb(a, i, b, j):
    iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
    ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
    if iw < 0.0:
        iw = 0.0
    if ih < 0.0:
        ih = 0.0
    inter = iw * ih
    union = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1]) + (b[j, 2] - b[j, 0]) * (
        b[j, 3] - b[j, 1]
    ) - inter
    hull = (max(a[i, 2], b[j, 2]) - min(a[i, 0], b[j, 0])) * (
        max(a[i, 3], b[j, 3]) - min(a[i, 1], b[j, 1])
    )
    return inter, union, hull


@_njit
def pairwise_iou_nb(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            inter, union, _ = _pair_terms_nb(a, i, b, j)
            out[i, j] = inter / union
    return out


@_njit
def pairwise_giou_nb(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            inter, union, hull = _pair_terms_nb(a, i, b, j)
            out[i, j] = inter / union - (hull - union) / hull
    return out


KERNELS = (
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "pairwise_iou",
    "pairwise_giou",
    "scatter_add",
    "adamw_update",
)

_suffix = "_nb" if USE_NUMBA else "_np"
layernorm_forward = globals()["layernorm_forward" + _suffix]
layernorm_backward = globals()["layernorm_backward" + _suffix]
softmax_forward = globals()["softmax_forward" + _suffix]
softmax_backward = globals()["softmax_backward" + _suffix]
gelu_forward = globals()["gelu_forward" + _suffix]
gelu_backward = globals()["gelu_backward" + _suffix]
pairwise_iou = globals()["pairwise_iou" + _suffix]
pairwise_giou = globals()["pairwise_giou" + _suffix]
scatter_add = globals()["scatter_add" + _suffix]
adamw_update = globals()["adamw_update" + _suffix]
