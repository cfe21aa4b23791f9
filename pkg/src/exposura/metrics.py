"""Image quality metrics and the tabular report they feed.

PSNR is computed jointly over RGB; SSIM on Rec.601 luma with the standard
11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1.0) over
valid windows only.  The no-reference score comes from the scene-statistics
model (see the niqe module); the perceptual index combines it with an
externally supplied Ma score, since that metric's learned internals are out
of scope here.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

from .imaging import ImageBuffer, rec601_luma
from .niqe import (PristineModel, fit_aggd, fit_pristine,
                   image_feature_vectors, niqe)

__all__ = [
    "psnr", "ssim", "pi", "matting_error", "fit_aggd", "niqe",
    "PristineModel", "fit_pristine", "image_feature_vectors",
    "ImageRecord", "MetricReport", "MATTING_SCALE",
]

MATTING_SCALE = 1000.0


def psnr(a: ImageBuffer, b: ImageBuffer, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all channels; +inf when images match."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"psnr: shape mismatch {a.data.shape} vs "
                         f"{b.data.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_window(n: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (n - 1) / 2.0
    x = np.arange(n) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_WIN = _ssim_window()


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean local SSIM on luma, valid 11x11 Gaussian windows, range 1.0."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"ssim: shape mismatch {a.data.shape} vs "
                         f"{b.data.shape}")
    x = rec601_luma(a)
    y = rec601_luma(b)
    n = _SSIM_WIN.shape[0]
    if x.shape[0] < n or x.shape[1] < n:
        raise ValueError(f"ssim: image {x.shape[1]}x{x.shape[0]} smaller "
                         f"than the {n}x{n} window")
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2

    def f(im):
        return correlate2d(im, _SSIM_WIN, mode="valid")

    mu_x = f(x)
    mu_y = f(y)
    var_x = f(x * x) - mu_x * mu_x
    var_y = f(y * y) - mu_y * mu_y
    cov = f(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def pi(niqe_score: float, ma_score: float) -> float:
    """Perceptual index: 0.5 * ((10 - ma) + niqe); lower is better."""
    return 0.5 * ((10.0 - ma_score) + niqe_score)


def matting_error(alpha_pred: ImageBuffer,
                  alpha_gt: ImageBuffer) -> tuple[float, float]:
    """Whole-image (MSE, MAE) between alpha mattes, both scaled by 1e3."""
    if alpha_pred.data.shape != alpha_gt.data.shape:
        raise ValueError(f"matting_error: shape mismatch "
                         f"{alpha_pred.data.shape} vs {alpha_gt.data.shape}")
    diff = alpha_pred.data.astype(np.float64) - alpha_gt.data.astype(np.float64)
    mse = float(np.mean(diff * diff)) * MATTING_SCALE
    mae = float(np.mean(np.abs(diff))) * MATTING_SCALE
    return mse, mae


# ---------------------------------------------------------------------------
# report container

_COLUMNS = ("psnr", "ssim", "niqe", "pi", "matting_mse", "matting_mae")


@dataclass
class ImageRecord:
    image_id: str
    psnr: float | None = None
    ssim: float | None = None
    niqe: float | None = None
    pi: float | None = None
    matting_mse: float | None = None
    matting_mae: float | None = None


@dataclass
class MetricReport:
    records: list[ImageRecord]
    metadata: dict[str, str] = field(default_factory=dict)

    def columns(self) -> list[str]:
        return [c for c in _COLUMNS
                if any(getattr(r, c) is not None for r in self.records)]

    def aggregate(self) -> dict[str, float]:
        """Arithmetic mean per column over records carrying a value."""
        out = {}
        for c in self.columns():
            vals = [getattr(r, c) for r in self.records
                    if getattr(r, c) is not None]
            out[c] = float(np.mean(vals))
        return out

    def to_csv_text(self) -> str:
        cols = self.columns()
        lines = ["image," + ",".join(cols)]
        for r in self.records:
            cells = [_fmt(getattr(r, c)) for c in cols]
            lines.append(r.image_id + "," + ",".join(cells))
        agg = self.aggregate()
        lines.append("aggregate," + ",".join(_fmt(agg[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        recs = []
        for r in self.records:
            d = {"image": r.image_id}
            for c in self.columns():
                v = getattr(r, c)
                d[c] = v
            recs.append(d)
        return {"records": recs, "aggregate": self.aggregate(),
                "metadata": dict(self.metadata)}

    def save_csv(self, path: str) -> None:
        _atomic_text(path, self.to_csv_text())

    def save_json(self, path: str) -> None:
        _atomic_text(path, json.dumps(self.to_json_obj(), indent=2) + "\n")


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def _atomic_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
