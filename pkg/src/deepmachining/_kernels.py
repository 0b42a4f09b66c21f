"""Fused numba loops for the memory-bound hot spots (layer norm)."""

import numba
import numpy as np


@numba.njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    rows, C = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for i in range(rows):
        m = 0.0
        for j in range(C):
            m += x[i, j]
        m /= C
        v = 0.0
        for j in range(C):
            d = x[i, j] - m
            v += d * d
        r = 1.0 / np.sqrt(v / C + eps)
        rstd[i] = r
        for j in range(C):
            h = (x[i, j] - m) * r
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, rstd


@numba.njit(cache=True)
def layer_norm_bwd(g, xhat, rstd, gamma, need_x):
    rows, C = g.shape
    dgamma = np.zeros(C, dtype=np.float64)
    dbeta = np.zeros(C, dtype=np.float64)
    dx = np.empty_like(g) if need_x else np.empty((0, C), dtype=g.dtype)
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(C):
            gj = g[i, j]
            dgamma[j] += gj * xhat[i, j]
            dbeta[j] += gj
            dh = gj * gamma[j]
            m1 += dh
            m2 += dh * xhat[i, j]
        if need_x:
            m1 /= C
            m2 /= C
            r = rstd[i]
            for j in range(C):
                dx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * r
    return dx, dgamma, dbeta


@numba.njit(cache=True)
def maxpool_fwd(xp, k, stride, L_out):
    """xp is [B, Lp, C] (already padded); returns max and first-argmax offset per window."""
    B, _, C = xp.shape
    out = np.empty((B, L_out, C), dtype=xp.dtype)
    arg = np.empty((B, L_out, C), dtype=np.int32)
    for b in range(B):
        for t in range(L_out):
            base = t * stride
            for c in range(C):
                best = xp[b, base, c]
                bj = 0
                for j in range(1, k):
                    v = xp[b, base + j, c]
                    if v > best:
                        best = v
                        bj = j
                out[b, t, c] = best
                arg[b, t, c] = base + bj
    return out, arg


@numba.njit(cache=True)
def maxpool_bwd(g, arg, Lp):
    B, L_out, C = g.shape
    gx = np.zeros((B, Lp, C), dtype=g.dtype)
    for b in range(B):
        for t in range(L_out):
            for c in range(C):
                gx[b, arg[b, t, c], c] += g[b, t, c]
    return gx
