"""Shared fixtures: tiny network configs, synthetic datasets, and the
acceptance-line reporter."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "scripts"))

from exposura.imaging import ImageBuffer, ev_shift, format_ev_tag, save_image
from exposura.networks import DiscriminatorConfig, GeneratorConfig
from exposura.trainer import TrainConfig

# collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


def tiny_generator(size=None):
    return GeneratorConfig(encoder_channels=(4, 8, 8, 8, 8),
                           n_residual_blocks=1, input_size=size)


def tiny_discriminator():
    return DiscriminatorConfig(base_channels=4)


def tiny_train_config(**overrides):
    base = dict(steps=2, batch_size=1, crop_size=32, seed=0,
                checkpoint_every=1000,
                generator=tiny_generator(),
                discriminator=tiny_discriminator())
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_config():
    return tiny_train_config()


def checker_image(size: int, seed: int) -> ImageBuffer:
    """Distinct mid-tone image; seeded so every call is reproducible."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = 0.3 + 0.3 * np.sin(2 * np.pi * (x * 2 + seed % 5)) * y
    img = np.stack([base, 0.9 * base + 0.05, 1.1 * base], axis=-1)
    img += rng.normal(0, 0.01, img.shape)
    return ImageBuffer(np.clip(img, 0.1, 0.75).astype(np.float32))


def build_pair_tree(root: str, n_stems: int = 2, size: int = 32,
                    evs=(-1.0, 1.0), seed: int = 50) -> None:
    """dataset layout: input/<stem>_<tag>.png + target/<stem>.png"""
    os.makedirs(os.path.join(root, "input"), exist_ok=True)
    os.makedirs(os.path.join(root, "target"), exist_ok=True)
    for i in range(n_stems):
        img = checker_image(size, seed + i)
        save_image(img, os.path.join(root, "target", f"s{i}.png"))
        for ev in evs:
            save_image(ev_shift(img, ev),
                       os.path.join(root, "input",
                                    f"s{i}_{format_ev_tag(ev)}.png"))


@pytest.fixture
def pair_tree(tmp_path):
    root = str(tmp_path / "data")
    build_pair_tree(root)
    return root
