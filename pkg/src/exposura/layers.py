"""Network building blocks on top of the autodiff ops.

Instance normalization and spectral normalization are registered as single
tape nodes with hand-derived adjoints rather than composed from primitives;
that keeps tapes short and the backward pass cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class InstanceNormState:
    """Per-channel affine after spatial standardization."""
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma.shape != self.beta.shape or self.gamma.data.ndim != 1:
            raise ValueError(
                f"gamma/beta must be 1-D and equal length, got "
                f"{self.gamma.shape} and {self.beta.shape}")


def instance_norm(x: Tensor, state: InstanceNormState) -> Tensor:
    """Standardize each (instance, channel) over its spatial positions."""
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm input must be rank 4, got {x.shape}")
    C = x.shape[1]
    if state.gamma.shape[0] != C:
        raise ValueError(
            f"instance_norm channel mismatch: input has {C} channels but "
            f"state carries {state.gamma.shape[0]}")
    xd = x.data
    eps = xd.dtype.type(state.epsilon)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gam = state.gamma.data.reshape(1, C, 1, 1)
    y = gam * xhat + state.beta.data.reshape(1, C, 1, 1)

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gh = g * gam
        gx = inv * (gh - gh.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True))
        return (gx.astype(xd.dtype, copy=False), ggamma, gbeta)

    return ad.apply_op("instance_norm", [x, state.gamma, state.beta], y, vjp)


@dataclass
class SpectralNormState:
    """Persistent power-iteration vectors for one weight matrix."""
    u: np.ndarray
    v: np.ndarray
    n_power_iterations: int = 1

    @classmethod
    def for_weight(cls, shape: tuple[int, ...], rng: np.random.Generator,
                   n_power_iterations: int = 1,
                   dtype=np.float32) -> "SpectralNormState":
        out = shape[0]
        rest = int(np.prod(shape[1:]))
        u = rng.standard_normal(out).astype(dtype)
        v = rng.standard_normal(rest).astype(dtype)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v),
                   n_power_iterations)

    def update(self, weight: np.ndarray) -> None:
        """Run power-iteration steps against the (reshaped) weight matrix."""
        w2 = weight.reshape(weight.shape[0], -1)
        u, v = self.u, self.v
        for _ in range(self.n_power_iterations):
            v = w2.T @ u
            v = v / max(np.linalg.norm(v), 1e-12)
            u = w2 @ v
            u = u / max(np.linalg.norm(u), 1e-12)
        self.u = u.astype(weight.dtype, copy=False)
        self.v = v.astype(weight.dtype, copy=False)

    def sigma(self, weight: np.ndarray) -> float:
        w2 = weight.reshape(weight.shape[0], -1)
        return float(self.u @ (w2 @ self.v))


def spectral_normalize(weight: Tensor, state: SpectralNormState, *,
                       update: bool = True) -> Tensor:
    """Divide the weight by its estimated top singular value.

    With ``update`` the persistent u/v take power-iteration steps first
    (training convention: one step per use).  u and v are treated as
    constants by the backward pass.  A zero matrix is guarded: the estimate
    never drops below 1e-12.
    """
    wd = weight.data
    if update:
        state.update(wd)
    sigma = max(state.sigma(wd), 1e-12)
    y = wd / wd.dtype.type(sigma)
    u, v = state.u, state.v  # update() rebinds rather than mutates

    def vjp(g):
        coef = (g * wd).sum() / (sigma * sigma)
        gw = g / wd.dtype.type(sigma)
        gw -= wd.dtype.type(coef) * np.outer(u, v).reshape(wd.shape)
        return (gw,)

    return ad.apply_op("spectral_normalize", [weight], y, vjp)


@dataclass
class ResidualBlockConfig:
    channels: int
    kernel: int = 3
    norm: bool = True

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"residual block kernel must be odd, got {self.kernel}")


RESIDUAL_BLOCK_KEYS = ("conv1.w", "conv1.b", "in1.gamma", "in1.beta",
                       "conv2.w", "conv2.b", "in2.gamma", "in2.beta")


def residual_block(x: Tensor, cfg: ResidualBlockConfig,
                   weights: Mapping[str, Tensor]) -> Tensor:
    """x + F(x) with F = conv-norm-relu-conv-norm, reflection padded."""
    if x.shape[1] != cfg.channels:
        raise ValueError(
            f"residual block expects {cfg.channels} channels, input has "
            f"{x.shape[1]} (shape {x.shape})")
    p = cfg.kernel // 2

    def branch(h, tag):
        h = ad.pad_reflect(h, p) if p else h
        h = ad.conv2d(h, weights[f"{tag}.w"], weights[f"{tag}.b"], stride=1, pad=0)
        if cfg.norm:
            n = tag.replace("conv", "in")
            h = instance_norm(h, InstanceNormState(
                weights[f"{n}.gamma"], weights[f"{n}.beta"]))
        return h

    f = ad.relu(branch(x, "conv1"))
    f = branch(f, "conv2")
    return ad.add(x, f)
