"""Convolution kernels with two interchangeable backends.

The heavy inner loops (im2col packing and the col2im scatter of the input
gradient) are JIT-compiled with numba on the default backend; the pure-numpy
fallback uses stride tricks and bincount scatter.  Select with the
``EXPOSURA_BACKEND`` environment variable (``numba`` or ``numpy``) or
:func:`set_backend`.  ``reference.py`` holds direct-loop implementations used
by the test suite as the correctness anchor; backends must agree with it to
1e-6 at float64.

All kernels take NCHW activations and (out_c, in_c, k, k) weights.  Transposed
convolution is served by the same three primitives through the adjoint
relationship (its forward is ``conv2d_grad_input`` and vice versa).
"""

from __future__ import annotations

import os

import numpy as np

_VALID = ("numba", "numpy")


def _default_backend() -> str:
    env = os.environ.get("EXPOSURA_BACKEND", "").strip().lower()
    if env:
        if env not in _VALID:
            raise ValueError(
                f"EXPOSURA_BACKEND must be one of {_VALID}, got {env!r}")
        return env
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        return "numpy"


_backend_name = _default_backend()
_impl_cache: dict = {}


def get_backend() -> str:
    return _backend_name


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and benchmarks)."""
    global _backend_name
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    _backend_name = name


def _impl():
    mod = _impl_cache.get(_backend_name)
    if mod is None:
        if _backend_name == "numba":
            from . import numba_backend as mod
        else:
            from . import numpy_backend as mod
        _impl_cache[_backend_name] = mod
    return mod


def zero_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of NCHW input with (O, C, k, k) weights."""
    return _impl().conv2d_forward_padded(zero_pad(x, pad), w, stride)


def conv2d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int, pad: int,
                      in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of conv2d_forward with respect to its input."""
    gxp = _impl().conv2d_grad_input_padded(
        np.ascontiguousarray(gy), w, stride, in_h + 2 * pad, in_w + 2 * pad)
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, :, pad:pad + in_h, pad:pad + in_w])


def conv2d_grad_weight(x: np.ndarray, gy: np.ndarray, stride: int, pad: int,
                       k: int) -> np.ndarray:
    """Adjoint of conv2d_forward with respect to its weights."""
    return _impl().conv2d_grad_weight_padded(
        zero_pad(x, pad), np.ascontiguousarray(gy), stride, k)


def adam_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
              lr, b1, b2, c1, c2, eps) -> None:
    """Fused in-place Adam update; m, v, p are modified.

    Scalars must already carry the parameter dtype so both backends do the
    arithmetic at the same precision.
    """
    _impl().adam_step_flat(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                           m.reshape(-1), v.reshape(-1),
                           lr, b1, b2, c1, c2, eps)
