"""Numba kernel backend: JIT-compiled pack/scatter loops around BLAS matmul.

im2col packing and the col2im scatter are where a pure-numpy version either
copies through awkward stride views or falls back to bincount; here they are
tight nopython loops.  Accumulation order is fixed, so results are
deterministic run to run.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _pack(xp, k, stride, Ho, Wo):
    B, C, Hp, Wp = xp.shape
    col = np.empty((B, Ho * Wo, C * k * k), dtype=xp.dtype)
    for b in range(B):
        for i in range(Ho):
            ib = i * stride
            for j in range(Wo):
                jb = j * stride
                r = i * Wo + j
                t = 0
                for c in range(C):
                    for p in range(k):
                        for q in range(k):
                            col[b, r, t] = xp[b, c, ib + p, jb + q]
                            t += 1
    return col


@njit(cache=True)
def _scatter(colg, k, stride, Ho, Wo, C, Hp, Wp):
    B = colg.shape[0]
    gxp = np.zeros((B, C, Hp, Wp), dtype=colg.dtype)
    for b in range(B):
        for i in range(Ho):
            ib = i * stride
            for j in range(Wo):
                jb = j * stride
                r = i * Wo + j
                t = 0
                for c in range(C):
                    for p in range(k):
                        for q in range(k):
                            gxp[b, c, ib + p, jb + q] += colg[b, r, t]
                            t += 1
    return gxp


def conv2d_forward_padded(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    O, _, k, _ = w.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    col = _pack(xp, k, stride, Ho, Wo)
    y = col.reshape(B * Ho * Wo, -1) @ w.reshape(O, -1).T
    return np.ascontiguousarray(
        y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_grad_weight_padded(xp: np.ndarray, gy: np.ndarray, stride: int,
                              k: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    C = xp.shape[1]
    col = _pack(xp, k, stride, Ho, Wo).reshape(B * Ho * Wo, -1)
    g2 = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    return np.ascontiguousarray((g2.T @ col).reshape(O, C, k, k))


def conv2d_grad_input_padded(gy: np.ndarray, w: np.ndarray, stride: int,
                             Hp: int, Wp: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    _, C, k, _ = w.shape
    g2 = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    colg = np.ascontiguousarray(
        (g2 @ w.reshape(O, -1)).reshape(B, Ho * Wo, C * k * k))
    return _scatter(colg, k, stride, Ho, Wo, C, Hp, Wp)


@njit(cache=True)
def adam_step_flat(p, g, m, v, lr, b1, b2, c1, c2, eps):
    one = p.dtype.type(1.0)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (one - b1) * gi
        vi = b2 * v[i] + (one - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
