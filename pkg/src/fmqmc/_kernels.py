"""Fused layer-norm + mish kernels.

Each residual branch applies ``mish(LN(h))`` twice.  Computing the value,
the cached statistics and the forward-mode tangents in compiled row loops is
what makes exact per-step Jacobians affordable for 2**16 points.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

EXP_CLIP = 20.0


@njit(cache=True, error_model="numpy")
def _layer_norm(h, g, b, eps):
    n, W = h.shape
    a = np.empty((n, W))
    xhat = np.empty((n, W))
    rstd = np.empty(n)
    for i in range(n):
        mu = 0.0
        for w in range(W):
            mu += h[i, w]
        mu /= W
        var = 0.0
        for w in range(W):
            c = h[i, w] - mu
            var += c * c
        r = 1.0 / math.sqrt(var / W + eps)
        rstd[i] = r
        for w in range(W):
            xh = (h[i, w] - mu) * r
            xhat[i, w] = xh
            a[i, w] = xh * g[w] + b[w]
    return a, xhat, rstd


@njit(cache=True, error_model="numpy")
def _mish_from_exp(a, s):
    # mish(a) = a tanh(softplus(a)); with s = e^a, tanh(softplus(a)) = q / (q + 2), q = s (s + 2)
    n, W = a.shape
    m = np.empty((n, W))
    dmish = np.empty((n, W))
    for i in range(n):
        for w in range(W):
            sv = s[i, w]
            av = a[i, w]
            q = sv * (sv + 2.0)
            inv = 1.0 / (q + 2.0)
            tsp = q * inv
            m[i, w] = av * tsp
            dmish[i, w] = tsp + av * (4.0 * (q + 1.0) * inv * inv) * (sv / (1.0 + sv))
    return m, dmish


def ln_mish_forward(h, g, b, eps):
    """Rows of ``mish(g * (h - mean) / std + b)``.

    Returns the activation, the normalized input ``xhat``, the reciprocal
    standard deviation per row, and ``mish'`` at the pre-activation.  The
    exponential runs through numpy's vectorized ``exp``, which is several
    times faster than a scalar call inside the compiled loop.
    """
    a, xhat, rstd = _layer_norm(h, g, b, eps)
    s = np.exp(np.minimum(a, EXP_CLIP))
    m, dmish = _mish_from_exp(a, s)
    return m, xhat, rstd, dmish


@njit(cache=True, error_model="numpy")
def ln_mish_tangent(dh, xhat, rstd, g, dmish):
    """Push tangents ``dh`` (n, k, W) through ``mish(LN(.))`` linearized at cached statistics."""
    n, k, W = dh.shape
    out = np.empty((n, k, W))
    fac = np.empty(W)
    for i in range(n):
        r = rstd[i]
        for w in range(W):
            fac[w] = dmish[i, w] * g[w] * r
        for j in range(k):
            s0 = 0.0
            s1 = 0.0
            for w in range(W):
                v = dh[i, j, w]
                s0 += v
                s1 += v * xhat[i, w]
            s0 /= W
            s1 /= W
            for w in range(W):
                out[i, j, w] = (dh[i, j, w] - s0 - xhat[i, w] * s1) * fac[w]
    return out
