"""Training objectives.

Least-squares adversarial terms over the three discriminator scales, L1
feature matching across all discriminator layers, an L1 pixel term, and a
perceptual term computed on a frozen 5-stage conv pyramid.  The pyramid is
deliberately not trained: it is either seeded deterministically or imported
from a weight container, so the whole artifact stays self-contained while
keeping the deep-feature L1 structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_weights, save_weights
from .errors import DataError


@dataclass
class LossWeights:
    lambda_pixel: float = 0.5
    beta_perceptual: float = 1.0
    lambda_fm: float = 10.0
    perceptual_layer_coeffs: tuple[float, ...] = (
        1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)

    def __post_init__(self):
        vals = (self.lambda_pixel, self.beta_perceptual, self.lambda_fm,
                *self.perceptual_layer_coeffs)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {self}")
        if len(self.perceptual_layer_coeffs) != 5:
            raise ValueError("exactly 5 perceptual layer coefficients required")


FEATURE_CHANNELS = (16, 32, 64, 128, 128)
FEATURE_SEED = 0x1D06


class FeatureExtractor:
    """Frozen 5-stage stride-2 conv pyramid with ReLU tap points."""

    def __init__(self, weights: dict[str, np.ndarray], in_channels: int = 3):
        self.in_channels = in_channels
        c_prev = in_channels
        for i, c in enumerate(FEATURE_CHANNELS):
            for suffix, shape in ((f"feat.{i}.w", (c, c_prev, 3, 3)),
                                  (f"feat.{i}.b", (c,))):
                if suffix not in weights:
                    raise DataError(f"feature extractor missing tensor {suffix!r}")
                if weights[suffix].shape != shape:
                    raise DataError(
                        f"feature extractor tensor {suffix!r} has shape "
                        f"{weights[suffix].shape}, expected {shape}")
            c_prev = c
        extra = [k for k in weights if not k.startswith("feat.")]
        if extra:
            raise DataError(f"feature extractor container has unrelated "
                            f"tensors: {extra[:5]}")
        self.weights = weights
        self._cache: dict[object, dict[str, np.ndarray]] = {}

    @classmethod
    def seeded(cls, seed: int = FEATURE_SEED,
               in_channels: int = 3) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        w: dict[str, np.ndarray] = {}
        c_prev = in_channels
        for i, c in enumerate(FEATURE_CHANNELS):
            bound = np.sqrt(3.0 / (c_prev * 9))
            w[f"feat.{i}.w"] = rng.uniform(
                -bound, bound, (c, c_prev, 3, 3)).astype(np.float32)
            w[f"feat.{i}.b"] = np.zeros(c, dtype=np.float32)
            c_prev = c
        return cls(w, in_channels)

    @classmethod
    def from_file(cls, path: str, in_channels: int = 3) -> "FeatureExtractor":
        return cls(load_weights(path), in_channels)

    def save(self, path: str) -> None:
        save_weights(path, self.weights)

    def _weights_as(self, dtype) -> dict[str, np.ndarray]:
        key = np.dtype(dtype)
        if key not in self._cache:
            self._cache[key] = {k: v.astype(dtype, copy=False)
                                for k, v in self.weights.items()}
        return self._cache[key]

    def features(self, x: Tensor) -> list[Tensor]:
        """The five post-ReLU stage outputs for an NCHW batch."""
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"feature extractor expects "
                             f"(B, {self.in_channels}, H, W), got {x.shape}")
        w = self._weights_as(x.dtype)
        taps = []
        h = x
        for i in range(5):
            h = ad.conv2d(h, ad.tensor(w[f"feat.{i}.w"]),
                          ad.tensor(w[f"feat.{i}.b"]), stride=2, pad=1)
            h = ad.relu(h)
            taps.append(h)
        return taps


def _check_scales(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"{what}: got {len(a)} scales vs {len(b)}")


def adversarial_loss_d(real_maps: Sequence[Tensor],
                       fake_maps: Sequence[Tensor]) -> Tensor:
    """Least-squares discriminator objective, averaged over scales.

    Real patch maps are pulled to 1, fake maps to 0.
    """
    _check_scales(real_maps, fake_maps, "adversarial_loss_d")
    total = None
    for r, f in zip(real_maps, fake_maps):
        term = ad.add(ad.sq_mean(ad.shift(r, -1.0)), ad.sq_mean(f))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(real_maps))


def adversarial_loss_g(fake_maps: Sequence[Tensor]) -> Tensor:
    """Generator side: pull fake patch maps to 1, averaged over scales."""
    if not fake_maps:
        raise ValueError("adversarial_loss_g: no patch maps given")
    total = None
    for f in fake_maps:
        term = ad.sq_mean(ad.shift(f, -1.0))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(fake_maps))


def feature_matching_loss(real_feats: Sequence[Sequence[Tensor]],
                          fake_feats: Sequence[Sequence[Tensor]]) -> Tensor:
    """Mean over all (scale, layer) pairs of the L1 feature distance."""
    _check_scales(real_feats, fake_feats, "feature_matching_loss")
    total = None
    count = 0
    for rs, fs in zip(real_feats, fake_feats):
        _check_scales(rs, fs, "feature_matching_loss layers")
        for r, f in zip(rs, fs):
            term = ad.abs_mean(ad.sub(r, f))
            total = term if total is None else ad.add(total, term)
            count += 1
    if count == 0:
        raise ValueError("feature_matching_loss: empty feature lists")
    return ad.scale(total, 1.0 / count)


def pixel_loss(y_fake: Tensor, y_real: Tensor) -> Tensor:
    """Mean absolute error between output and target images."""
    return ad.abs_mean(ad.sub(y_fake, y_real))


def perceptual_loss(y_fake: Tensor, y_real: Tensor,
                    extractor: FeatureExtractor,
                    coeffs: Sequence[float]) -> Tensor:
    """Coefficient-weighted L1 distance at the extractor's five taps."""
    if extractor is None:
        raise ValueError("perceptual_loss: extractor not initialized")
    if y_fake.shape != y_real.shape:
        raise ValueError(f"perceptual_loss: image shapes differ, "
                         f"{y_fake.shape} vs {y_real.shape}")
    if len(coeffs) != 5:
        raise ValueError(f"perceptual_loss needs 5 coefficients, got {len(coeffs)}")
    ff = extractor.features(y_fake)
    fr = extractor.features(y_real)
    total = None
    for c, a, b in zip(coeffs, ff, fr):
        term = ad.scale(ad.abs_mean(ad.sub(a, b)), c)
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class GeneratorLossParts:
    adversarial: Tensor
    feature_matching: Tensor
    pixel: Tensor
    perceptual: Tensor


def total_generator_loss(parts: GeneratorLossParts,
                         weights: LossWeights) -> Tensor:
    out = ad.add(parts.adversarial,
                 ad.scale(parts.feature_matching, weights.lambda_fm))
    out = ad.add(out, ad.scale(parts.pixel, weights.lambda_pixel))
    return ad.add(out, ad.scale(parts.perceptual, weights.beta_perceptual))
