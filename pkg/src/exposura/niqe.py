"""Natural-scene-statistics quality model (no-reference).

Pipeline: grayscale in [0, 255] -> local mean/contrast normalization (MSCN)
with a 7x7 Gaussian window (sigma 7/6, replicated boundary, +1 in the
denominator) -> asymmetric generalized Gaussian fits of the coefficients and
their four circularly shifted pairwise products -> 18 features per scale at
two scales (the second a 2x2 box-average downsample) -> per-patch 36-vectors.

A pristine model is the (mean, covariance) of those vectors over sharp
patches of clean photos; the score of an image is the Mahalanobis-style
distance between its patch statistics and the model, with the averaged
covariance pseudo-inverted.  Sharp patches are those whose mean local
contrast exceeds 0.75x the image maximum; the same selection is applied when
fitting and when scoring, so the two sides of the distance are consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate
from scipy.special import gamma as _gamma

from .checkpoint import load_weights, save_weights
from .errors import DataError, NumericError
from .imaging import ImageBuffer, rec601_luma

PATCH_SIZE = 96
SHARPNESS_FRACTION = 0.75

_AGGD_GAM = np.round(np.arange(0.2, 10.0 + 1e-9, 0.001), 3)
_AGGD_R = (_gamma(2.0 / _AGGD_GAM) ** 2 /
           (_gamma(1.0 / _AGGD_GAM) * _gamma(3.0 / _AGGD_GAM)))


def fit_aggd(samples) -> tuple[float, float, float]:
    """Moment-matching AGGD fit: (alpha, sigma_left, sigma_right).

    sigma_left/right are the asymmetric scale parameters (already carrying
    the sqrt(gamma(1/a)/gamma(3/a)) factor).  The shape alpha comes from the
    standard mean-abs/variance ratio inverted against a lookup grid.
    """
    vec = np.asarray(samples, dtype=np.float64).ravel()
    if vec.size < 2:
        raise ValueError(f"fit_aggd needs at least 2 samples, got {vec.size}")
    if np.all(vec == vec[0]):
        raise ValueError("fit_aggd: degenerate samples (all equal)")
    neg = vec[vec < 0]
    pos = vec[vec > 0]
    left_std = np.sqrt(np.mean(neg * neg)) if neg.size else 0.0
    right_std = np.sqrt(np.mean(pos * pos)) if pos.size else 0.0
    gamma_hat = left_std / max(right_std, 1e-12)
    r_hat = np.mean(np.abs(vec)) ** 2 / np.mean(vec * vec)
    r_norm = (r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1)
              / (gamma_hat ** 2 + 1) ** 2)
    alpha = float(_AGGD_GAM[np.argmin((_AGGD_R - r_norm) ** 2)])
    c = np.sqrt(_gamma(1.0 / alpha) / _gamma(3.0 / alpha))
    return alpha, float(left_std * c), float(right_std * c)


def _gaussian_window(n: int = 7, sigma: float = 7.0 / 6.0) -> np.ndarray:
    half = (n - 1) / 2.0
    x = np.arange(n) - half
    g1 = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g1, g1)
    return w / w.sum()


_MSCN_WINDOW = _gaussian_window()


def mscn(gray255: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the local
    contrast field, both float64, boundary replicated."""
    im = np.asarray(gray255, dtype=np.float64)
    mu = correlate(im, _MSCN_WINDOW, mode="nearest")
    var = correlate(im * im, _MSCN_WINDOW, mode="nearest") - mu * mu
    sigma = np.sqrt(np.maximum(var, 0.0))
    return (im - mu) / (sigma + 1.0), sigma


def _box_half(im: np.ndarray) -> np.ndarray:
    h2, w2 = im.shape[0] // 2, im.shape[1] // 2
    c = im[:2 * h2, :2 * w2]
    return c.reshape(h2, 2, w2, 2).mean(axis=(1, 3))


_PAIR_SHIFTS = ((0, 1), (1, 0), (1, 1), (-1, 1))


def patch_features(d: np.ndarray) -> np.ndarray:
    """18 AGGD-based features of one MSCN patch."""
    feats = []
    alpha, bl, br = fit_aggd(d)
    feats += [alpha, (bl + br) / 2.0]
    for shift in _PAIR_SHIFTS:
        pair = d * np.roll(d, shift, axis=(0, 1))
        alpha, bl, br = fit_aggd(pair)
        mean_param = (br - bl) * (_gamma(2.0 / alpha) / _gamma(1.0 / alpha))
        feats += [alpha, mean_param, bl, br]
    return np.array(feats, dtype=np.float64)


def image_feature_vectors(img: ImageBuffer, patch_size: int = PATCH_SIZE,
                          sharpness_fraction: float = SHARPNESS_FRACTION,
                          ) -> np.ndarray:
    """(n_sharp_patches, 36) feature matrix for one image."""
    gray = rec601_luma(img) * 255.0
    h, w = gray.shape
    nby, nbx = h // patch_size, w // patch_size
    if nby * nbx < 2:
        raise ValueError(
            f"image {w}x{h} too small: need at least 2 full "
            f"{patch_size}x{patch_size} patches")
    d1, sigma1 = mscn(gray)
    d2, _ = mscn(_box_half(gray))
    half = patch_size // 2

    sharpness = np.empty((nby, nbx))
    for by in range(nby):
        for bx in range(nbx):
            sharpness[by, bx] = sigma1[by * patch_size:(by + 1) * patch_size,
                                       bx * patch_size:(bx + 1) * patch_size].mean()
    peak = sharpness.max()
    # constant images land at ~1e-6 rather than exactly 0 through the
    # E[x^2]-E[x]^2 cancellation; anything below one millilevel is flat
    if peak <= 1e-3:
        raise NumericError("image is flat: no textured patches to "
                           "draw scene statistics from")
    keep = sharpness > sharpness_fraction * peak

    rows = []
    try:
        for by in range(nby):
            for bx in range(nbx):
                if not keep[by, bx]:
                    continue
                p1 = d1[by * patch_size:(by + 1) * patch_size,
                        bx * patch_size:(bx + 1) * patch_size]
                p2 = d2[by * half:(by + 1) * half,
                        bx * half:(bx + 1) * half]
                rows.append(np.concatenate([patch_features(p1),
                                            patch_features(p2)]))
    except ValueError as e:
        raise NumericError(f"degenerate patch statistics: {e}") from e
    return np.stack(rows)


@dataclass
class PristineModel:
    mean: np.ndarray                 # (36,)
    cov: np.ndarray                  # (36, 36)
    patch_size: int = PATCH_SIZE
    sharpness_fraction: float = SHARPNESS_FRACTION

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.shape != (36,) or self.cov.shape != (36, 36):
            raise ValueError(f"pristine model needs a 36-vector mean and "
                             f"36x36 covariance, got {self.mean.shape} and "
                             f"{self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-6):
            raise ValueError("pristine covariance is not symmetric")

    def save(self, path: str) -> None:
        save_weights(path, {
            "niqe.mean": self.mean.astype(np.float32),
            "niqe.cov": self.cov.astype(np.float32),
            "niqe.meta": np.array([self.patch_size, self.sharpness_fraction],
                                  dtype=np.float32),
        })

    @classmethod
    def load(cls, path: str) -> "PristineModel":
        bag = load_weights(path)
        for need in ("niqe.mean", "niqe.cov"):
            if need not in bag:
                raise DataError(f"{path}: pristine model missing tensor "
                                f"{need!r}")
        meta = bag.get("niqe.meta")
        patch = int(meta[0]) if meta is not None else PATCH_SIZE
        frac = float(meta[1]) if meta is not None else SHARPNESS_FRACTION
        return cls(bag["niqe.mean"], bag["niqe.cov"], patch, frac)


def fit_pristine(images, patch_size: int = PATCH_SIZE,
                 sharpness_fraction: float = SHARPNESS_FRACTION,
                 ) -> PristineModel:
    """Fit (mean, covariance) of patch features over a clean-photo corpus."""
    rows = []
    for img in images:
        rows.append(image_feature_vectors(img, patch_size, sharpness_fraction))
    if not rows:
        raise DataError("pristine corpus is empty")
    feats = np.concatenate(rows, axis=0)
    if feats.shape[0] < 2:
        raise DataError(f"pristine corpus yields only {feats.shape[0]} "
                        f"patches; need at least 2")
    mean = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return PristineModel(mean, cov, patch_size, sharpness_fraction)


def niqe(img: ImageBuffer, model: PristineModel) -> float:
    """Distance between the image's patch statistics and the pristine model."""
    feats = image_feature_vectors(img, model.patch_size,
                                  model.sharpness_fraction)
    if feats.shape[0] < 2:
        raise NumericError("too few sharp patches to estimate the image "
                           "feature covariance")
    mu_img = feats.mean(axis=0)
    cov_img = np.cov(feats, rowvar=False)
    diff = model.mean - mu_img
    pooled = (model.cov + cov_img) / 2.0
    d2 = float(diff @ np.linalg.pinv(pooled) @ diff)
    return float(np.sqrt(max(d2, 0.0)))
