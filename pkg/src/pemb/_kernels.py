"""Hot numeric kernels with numba-accelerated and pure-numpy twins.

The pairwise Bhattacharyya / expected-likelihood kernels do not decompose
into BLAS calls (the per-pair variance sums sit inside logs and denominators),
so the numba versions loop without materializing (N, M, D) temporaries.

Backend selection: PEMB_NUMBA=0 forces the numpy path, PEMB_NUMBA=1 requires
numba (ImportError if missing), unset picks numba when importable.
"""

from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("PEMB_NUMBA", "").strip().lower()

try:
    if _FLAG in ("0", "false", "off"):
        raise ImportError("numba disabled via PEMB_NUMBA=0")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    if _FLAG in ("1", "true", "on"):
        raise
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # identity decorator so the same source defines the numpy path
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        def wrap(fn):
            return fn
        return wrap


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pairwise Bhattacharyya distance
# d = (1/8) sum dmu^2 / vbar + 0.5 sum log(vbar / sqrt(vq*vg)),  vbar = (vq+vg)/2

def _bhattacharyya_matrix_np(mu_q, var_q, mu_g, var_g):
    dmu2 = (mu_q[:, None, :] - mu_g[None, :, :]) ** 2
    vbar = 0.5 * (var_q[:, None, :] + var_g[None, :, :])
    log_term = np.log(vbar) - 0.5 * (np.log(var_q)[:, None, :] + np.log(var_g)[None, :, :])
    return 0.125 * (dmu2 / vbar).sum(axis=2) + 0.5 * log_term.sum(axis=2)


@njit(cache=True)
def _bhattacharyya_matrix_nb(mu_q, var_q, mu_g, var_g):
    n, d = mu_q.shape
    m = mu_g.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            quad = 0.0
            logs = 0.0
            for k in range(d):
                vbar = 0.5 * (var_q[i, k] + var_g[j, k])
                diff = mu_q[i, k] - mu_g[j, k]
                quad += diff * diff / vbar
                logs += math.log(vbar) - 0.5 * (math.log(var_q[i, k]) + math.log(var_g[j, k]))
            out[i, j] = 0.125 * quad + 0.5 * logs
    return out


# ---------------------------------------------------------------------------
# pairwise expected-likelihood kernel, negative log form
# d = 0.5 sum [ log(2*pi*(vq+vg)) + dmu^2 / (vq+vg) ]

def _elk_matrix_np(mu_q, var_q, mu_g, var_g):
    dmu2 = (mu_q[:, None, :] - mu_g[None, :, :]) ** 2
    vsum = var_q[:, None, :] + var_g[None, :, :]
    return 0.5 * (np.log(2.0 * np.pi * vsum) + dmu2 / vsum).sum(axis=2)


@njit(cache=True)
def _elk_matrix_nb(mu_q, var_q, mu_g, var_g):
    n, d = mu_q.shape
    m = mu_g.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    two_pi = 2.0 * math.pi
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                vsum = var_q[i, k] + var_g[j, k]
                diff = mu_q[i, k] - mu_g[j, k]
                acc += math.log(two_pi * vsum) + diff * diff / vsum
            out[i, j] = 0.5 * acc
    return out


# ---------------------------------------------------------------------------
# sampled matching probability: mean over all J^2 sample pairs of
# sigmoid(-a * ||zv_i - zt_j|| + b); the pair count is quadratic in J, so the
# accumulation is the hottest loop in the package

def _pcme_accum_np(zv_s, zt_s, a, b):
    j = zv_s.shape[0]
    total = 0.0
    block = max(1, int(2**22 // max(j, 1)))
    for start in range(0, j, block):
        chunk = zv_s[start:start + block]
        d = np.sqrt(((chunk[:, None, :] - zt_s[None, :, :]) ** 2).sum(axis=2))
        z = b - a * d
        total += float(
            np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))).sum()
        )
    return total


@njit(cache=True)
def _pcme_accum_nb(zv_s, zt_s, a, b):
    j, d = zv_s.shape
    total = 0.0
    for i in range(j):
        for jj in range(j):
            acc = 0.0
            for k in range(d):
                diff = zv_s[i, k] - zt_s[jj, k]
                acc += diff * diff
            z = b - a * math.sqrt(acc)
            if z >= 0.0:
                total += 1.0 / (1.0 + math.exp(-z))
            else:
                ez = math.exp(z)
                total += ez / (1.0 + ez)
    return total


# ---------------------------------------------------------------------------
# k-means assignment: nearest centroid per point by squared Euclidean distance

def _kmeans_assign_np(points, centroids):
    d2 = (
        (points ** 2).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids ** 2).sum(axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1)
    return labels.astype(np.int64), d2[np.arange(points.shape[0]), labels]


@njit(cache=True)
def _kmeans_assign_nb(points, centroids):
    n, d = points.shape
    c = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        bj = 0
        bd = np.inf
        for j in range(c):
            acc = 0.0
            for k in range(d):
                diff = points[i, k] - centroids[j, k]
                acc += diff * diff
            if acc < bd:
                bd = acc
                bj = j
        labels[i] = bj
        best[i] = bd
    return labels, best


# ---------------------------------------------------------------------------
# gradient chains for the non-separable distances, given upstream G = dL/dD
# (numpy only: called with small batches in training/gradient checking)

def _bhattacharyya_backprop_np(mu_q, var_q, mu_g, var_g, grad):
    diff = mu_q[:, None, :] - mu_g[None, :, :]
    vbar = 0.5 * (var_q[:, None, :] + var_g[None, :, :])
    g = grad[:, :, None]
    d_mu_q = (g * 0.25 * diff / vbar).sum(axis=1)
    d_mu_g = -(g * 0.25 * diff / vbar).sum(axis=0)
    # d/d var_q of the quadratic: -(1/8) dmu^2 / vbar^2 * (1/2); of the log: 0.5*(0.5/vbar) - 0.25/var_q
    common = -0.0625 * diff * diff / (vbar * vbar) + 0.25 / vbar
    d_var_q = (g * common).sum(axis=1) - 0.25 / var_q * grad.sum(axis=1)[:, None]
    d_var_g = (g * common).sum(axis=0) - 0.25 / var_g * grad.sum(axis=0)[:, None]
    # chain var = exp(log_var)
    return d_mu_q, d_var_q * var_q, d_mu_g, d_var_g * var_g


def _elk_backprop_np(mu_q, var_q, mu_g, var_g, grad):
    diff = mu_q[:, None, :] - mu_g[None, :, :]
    vsum = var_q[:, None, :] + var_g[None, :, :]
    g = grad[:, :, None]
    d_mu_q = (g * diff / vsum).sum(axis=1)
    d_mu_g = -(g * diff / vsum).sum(axis=0)
    common = 0.5 * (1.0 / vsum - diff * diff / (vsum * vsum))
    d_var_q = (g * common).sum(axis=1)
    d_var_g = (g * common).sum(axis=0)
    return d_mu_q, d_var_q * var_q, d_mu_g, d_var_g * var_g


# public dispatch table: numba where it pays, numpy twins otherwise

if HAS_NUMBA:
    bhattacharyya_matrix = _bhattacharyya_matrix_nb
    elk_matrix = _elk_matrix_nb
    kmeans_assign = _kmeans_assign_nb
    pcme_accum = _pcme_accum_nb
else:
    bhattacharyya_matrix = _bhattacharyya_matrix_np
    elk_matrix = _elk_matrix_np
    kmeans_assign = _kmeans_assign_np
    pcme_accum = _pcme_accum_np

bhattacharyya_backprop = _bhattacharyya_backprop_np
elk_backprop = _elk_backprop_np
