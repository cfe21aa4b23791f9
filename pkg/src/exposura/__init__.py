"""Exposure-correction GAN toolkit: tensors with a gradient tape, the
generator/discriminator pair, training loop, image-quality metrics, and the
portrait-matting degradation harness."""

__version__ = "0.1.0"

from .errors import DataError, NumericError, UsageError

__all__ = ["DataError", "NumericError", "UsageError", "__version__"]
