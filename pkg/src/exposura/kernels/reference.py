"""Direct-loop convolution, the correctness anchor for both fast backends.

Deliberately naive: seven nested loops, no packing, no BLAS.  Only ever run on
small shapes by the agreement tests.
"""

from __future__ import annotations

import numpy as np


def conv2d_forward_padded(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    O, _, k, _ = w.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    y = np.zeros((B, O, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for p in range(k):
                            for q in range(k):
                                acc += xp[b, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    y[b, o, i, j] = acc
    return y


def conv2d_grad_weight_padded(xp: np.ndarray, gy: np.ndarray, stride: int,
                              k: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    C = xp.shape[1]
    gw = np.zeros((O, C, k, k), dtype=xp.dtype)
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for p in range(k):
                    for q in range(k):
                        acc = 0.0
                        for i in range(Ho):
                            for j in range(Wo):
                                acc += gy[b, o, i, j] * xp[b, c, i * stride + p, j * stride + q]
                        gw[o, c, p, q] += acc
    return gw


def conv2d_grad_input_padded(gy: np.ndarray, w: np.ndarray, stride: int,
                             Hp: int, Wp: int) -> np.ndarray:
    B, O, Ho, Wo = gy.shape
    _, C, k, _ = w.shape
    gxp = np.zeros((B, C, Hp, Wp), dtype=gy.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    g = gy[b, o, i, j]
                    for c in range(C):
                        for p in range(k):
                            for q in range(k):
                                gxp[b, c, i * stride + p, j * stride + q] += g * w[o, c, p, q]
    return gxp
