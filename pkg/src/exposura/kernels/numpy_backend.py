"""Pure-numpy kernel backend: stride-trick im2col plus BLAS matmul.

The input-gradient scatter uses bincount, which accumulates in float64 and is
cast back to the working dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp, (B, Ho, Wo, C, k, k),
        (s0, s2 * stride, s3 * stride, s1, s2, s3))
    return view.reshape(B * Ho * Wo, C * k * k), Ho, Wo


def conv2d_forward_padded(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    O, _, k, _ = w.shape
    col, Ho, Wo = _im2col(xp, k, stride)
    y = col @ w.reshape(O, -1).T
    return np.ascontiguousarray(
        y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_grad_weight_padded(xp: np.ndarray, gy: np.ndarray, stride: int,
                              k: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    C = xp.shape[1]
    col, _, _ = _im2col(xp, k, stride)
    g2 = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    return np.ascontiguousarray((g2.T @ col).reshape(O, C, k, k))


def _scatter_index(C: int, Hp: int, Wp: int, k: int, stride: int,
                   Ho: int, Wo: int) -> np.ndarray:
    # flat offsets into one (C, Hp, Wp) block, laid out as (Ho, Wo, C, k, k)
    i = np.arange(Ho)[:, None, None, None, None] * stride
    j = np.arange(Wo)[None, :, None, None, None] * stride
    c = np.arange(C)[None, None, :, None, None]
    p = np.arange(k)[None, None, None, :, None]
    q = np.arange(k)[None, None, None, None, :]
    return (c * Hp * Wp + (i + p) * Wp + (j + q)).ravel()


def conv2d_grad_input_padded(gy: np.ndarray, w: np.ndarray, stride: int,
                             Hp: int, Wp: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    _, C, k, _ = w.shape
    g2 = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    colg = (g2 @ w.reshape(O, -1)).reshape(B, Ho * Wo * C * k * k)
    idx = _scatter_index(C, Hp, Wp, k, stride, Ho, Wo)
    out = np.empty((B, C, Hp, Wp), dtype=gy.dtype)
    n = C * Hp * Wp
    for b in range(B):
        out[b] = np.bincount(idx, weights=colg[b], minlength=n) \
            .astype(gy.dtype).reshape(C, Hp, Wp)
    return out


def adam_step_flat(p, g, m, v, lr, b1, b2, c1, c2, eps):
    one = p.dtype.type(1.0)
    m *= b1
    m += (one - b1) * g
    v *= b2
    v += (one - b2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
