"""Generator and multi-scale patch discriminator.

The generator is a 5-level stride-2 encoder/decoder with residual blocks at
the bottleneck and additive skip connections: the i-th encoder output is
added to the input of the (6-i)-th decoder layer, so channel counts mirror
exactly and no concatenation is needed.  Input and output live in [-1, 1].

The discriminator evaluates the image at full, half and quarter resolution.
Each scale is a 5-layer conv stack whose weights are all spectrally
normalized; it emits a 1-channel patch map plus every intermediate
activation for feature matching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_weights
from .errors import DataError
from .layers import (InstanceNormState, ResidualBlockConfig,
                     SpectralNormState, instance_norm, residual_block,
                     spectral_normalize)

DOWN_FACTOR = 32  # five stride-2 stages


@dataclass
class GeneratorConfig:
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    n_residual_blocks: int = 4
    in_channels: int = 3
    out_channels: int = 3
    input_size: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.encoder_channels) != 5:
            raise ValueError(f"encoder_channels must list 5 widths, got "
                             f"{self.encoder_channels}")
        if self.n_residual_blocks < 0:
            raise ValueError("n_residual_blocks must be >= 0")
        if self.input_size is not None:
            check_spatial_extent(*self.input_size)


@dataclass
class DiscriminatorConfig:
    n_scales: int = 3
    base_channels: int = 64
    n_layers: int = 5
    in_channels: int = 3
    max_channels: int = 512
    leak: float = 0.2

    def __post_init__(self):
        if self.n_scales != 3:
            raise ValueError(f"the discriminator runs at exactly 3 scales, "
                             f"got n_scales={self.n_scales}")
        if self.n_layers != 5:
            raise ValueError(f"each scale has exactly 5 layers, got "
                             f"n_layers={self.n_layers}")

    def layer_channels(self) -> list[int]:
        body = [min(self.base_channels * (2 ** i), self.max_channels)
                for i in range(4)]
        return body + [1]


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    init: str  # conv | tconv | zeros | ones


def generator_param_specs(cfg: GeneratorConfig) -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    enc = list(cfg.encoder_channels)
    c_in = cfg.in_channels
    for i, c_out in enumerate(enc):
        p = f"g.enc.{i}"
        specs[f"{p}.w"] = ParamSpec((c_out, c_in, 4, 4), "conv")
        specs[f"{p}.b"] = ParamSpec((c_out,), "zeros")
        specs[f"{p}.gamma"] = ParamSpec((c_out,), "ones")
        specs[f"{p}.beta"] = ParamSpec((c_out,), "zeros")
        c_in = c_out
    c = enc[-1]
    for r in range(cfg.n_residual_blocks):
        p = f"g.res.{r}"
        specs[f"{p}.conv1.w"] = ParamSpec((c, c, 3, 3), "conv")
        specs[f"{p}.conv1.b"] = ParamSpec((c,), "zeros")
        specs[f"{p}.in1.gamma"] = ParamSpec((c,), "ones")
        specs[f"{p}.in1.beta"] = ParamSpec((c,), "zeros")
        specs[f"{p}.conv2.w"] = ParamSpec((c, c, 3, 3), "conv")
        specs[f"{p}.conv2.b"] = ParamSpec((c,), "zeros")
        specs[f"{p}.in2.gamma"] = ParamSpec((c,), "ones")
        specs[f"{p}.in2.beta"] = ParamSpec((c,), "zeros")
    dec_in = [enc[4], enc[3], enc[2], enc[1], enc[0]]
    dec_out = [enc[3], enc[2], enc[1], enc[0], cfg.out_channels]
    for i, (ci, co) in enumerate(zip(dec_in, dec_out)):
        p = f"g.dec.{i}"
        specs[f"{p}.w"] = ParamSpec((ci, co, 4, 4), "tconv")
        specs[f"{p}.b"] = ParamSpec((co,), "zeros")
        if i < 4:
            specs[f"{p}.gamma"] = ParamSpec((co,), "ones")
            specs[f"{p}.beta"] = ParamSpec((co,), "zeros")
    return specs


def discriminator_param_specs(cfg: DiscriminatorConfig) -> dict[str, ParamSpec]:
    specs: dict[str, ParamSpec] = {}
    chans = cfg.layer_channels()
    for s in range(1, cfg.n_scales + 1):
        c_in = cfg.in_channels
        for l, c_out in enumerate(chans, start=1):
            k = 1 if l == 5 else 4
            p = f"d.scale{s}.layer{l}"
            specs[f"{p}.w"] = ParamSpec((c_out, c_in, k, k), "conv")
            specs[f"{p}.b"] = ParamSpec((c_out,), "zeros")
            c_in = c_out
    return specs


def init_weights(specs: Mapping[str, ParamSpec], seed: int,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform for conv kernels, zeros/ones for the rest.

    Creation order follows the specs dict, so a given (specs, seed) pair is
    bitwise reproducible.
    """
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, spec in specs.items():
        if spec.init == "zeros":
            arr = np.zeros(spec.shape, dtype=dtype)
        elif spec.init == "ones":
            arr = np.ones(spec.shape, dtype=dtype)
        else:
            if spec.init == "conv":            # (out, in, k, k)
                fan_in = int(np.prod(spec.shape[1:]))
            elif spec.init == "tconv":         # (in, out, k, k)
                fan_in = spec.shape[0] * spec.shape[2] * spec.shape[3]
            else:
                raise ValueError(f"unknown init kind {spec.init!r}")
            bound = np.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, spec.shape).astype(dtype)
        out[name] = arr
    return out


def init_sn_states(d_params: Mapping[str, np.ndarray], seed,
                   n_power_iterations: int = 1) -> dict[str, SpectralNormState]:
    rng = np.random.default_rng(seed)
    states = {}
    for name in d_params:
        if name.startswith("d.") and name.endswith(".w"):
            states[name] = SpectralNormState.for_weight(
                d_params[name].shape, rng, n_power_iterations,
                dtype=d_params[name].dtype)
    return states


def watch_params(tape: ad.Tape,
                 params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: tape.watch(arr) for name, arr in params.items()}


def check_spatial_extent(h: int, w: int) -> None:
    if h % DOWN_FACTOR or w % DOWN_FACTOR:
        nh = -(-h // DOWN_FACTOR) * DOWN_FACTOR
        nw = -(-w // DOWN_FACTOR) * DOWN_FACTOR
        raise ValueError(
            f"generator input extents must be multiples of {DOWN_FACTOR}; "
            f"got {h}x{w}, pad to {nh}x{nw} first")


def _in_state(params: Mapping[str, Tensor], prefix: str) -> InstanceNormState:
    return InstanceNormState(params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def generator_forward(x: Tensor, params: Mapping[str, Tensor],
                      cfg: GeneratorConfig,
                      tap: Callable[[str, Tensor], None] | None = None
                      ) -> Tensor:
    """Run the encoder/residual/decoder stack.

    ``tap``, when given, receives named intermediate activations
    ("enc.0" .. "enc.4", "bottleneck") for shape probes and tests.
    """
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"generator expects (B, {cfg.in_channels}, H, W) "
                         f"input, got {x.shape}")
    check_spatial_extent(x.shape[2], x.shape[3])

    skips = []
    h = x
    for i in range(5):
        p = f"g.enc.{i}"
        h = ad.conv2d(h, params[f"{p}.w"], params[f"{p}.b"], stride=2, pad=1)
        h = instance_norm(h, _in_state(params, p))
        h = ad.relu(h)
        skips.append(h)
        if tap is not None:
            tap(f"enc.{i}", h)

    rcfg = ResidualBlockConfig(channels=cfg.encoder_channels[-1])
    for r in range(cfg.n_residual_blocks):
        prefix = f"g.res.{r}."
        sub = {k[len(prefix):]: v for k, v in params.items()
               if k.startswith(prefix)}
        h = residual_block(h, rcfg, sub)
    if tap is not None:
        tap("bottleneck", h)

    for i in range(5):
        h = ad.add(h, skips[4 - i])
        p = f"g.dec.{i}"
        h = ad.conv2d_transposed(h, params[f"{p}.w"], params[f"{p}.b"],
                                 stride=2, pad=1)
        if i < 4:
            h = instance_norm(h, _in_state(params, p))
            h = ad.relu(h)
    return ad.tanh(h)


@dataclass
class DiscriminatorOutput:
    patch_maps: list[Tensor]          # one 1-channel map per scale
    features: list[list[Tensor]]      # per scale, 5 post-activation tensors


def discriminator_forward(x: Tensor, params: Mapping[str, Tensor],
                          cfg: DiscriminatorConfig,
                          sn_states: Mapping[str, SpectralNormState], *,
                          update_sn: bool = True,
                          sn_hook: Callable[[str, np.ndarray], None] | None = None,
                          ) -> DiscriminatorOutput:
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"discriminator expects (B, {cfg.in_channels}, H, W)"
                         f" input, got {x.shape}")
    maps: list[Tensor] = []
    feats: list[list[Tensor]] = []
    for s in range(1, cfg.n_scales + 1):
        xi = x if s == 1 else ad.downsample_avg(x, 2 ** (s - 1))
        h = xi
        acts: list[Tensor] = []
        for l in range(1, 6):
            p = f"d.scale{s}.layer{l}"
            w = spectral_normalize(params[f"{p}.w"], sn_states[f"{p}.w"],
                                   update=update_sn)
            if sn_hook is not None:
                sn_hook(f"{p}.w", w.data)
            if l <= 3:
                h = ad.conv2d(h, w, params[f"{p}.b"], stride=2, pad=1)
            elif l == 4:
                h = ad.pad_zero(h, 1, 2, 1, 2)
                h = ad.conv2d(h, w, params[f"{p}.b"], stride=1, pad=0)
            else:
                h = ad.conv2d(h, w, params[f"{p}.b"], stride=1, pad=0)
            if l < 5:
                h = ad.leaky_relu(h, cfg.leak)
            acts.append(h)
        maps.append(h)
        feats.append(acts)
    return DiscriminatorOutput(maps, feats)


def expected_param_shapes(specs: Mapping[str, ParamSpec]) -> dict[str, tuple]:
    return {k: v.shape for k, v in specs.items()}


def validate_weight_bag(bag: Mapping[str, np.ndarray],
                        expected: Mapping[str, tuple], origin: str) -> None:
    """Verify a name->tensor mapping matches a parameter schema exactly."""
    missing = sorted(set(expected) - set(bag))
    extra = sorted(set(bag) - set(expected))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing tensors: {', '.join(missing[:8])}"
                         + (" ..." if len(missing) > 8 else ""))
        if extra:
            parts.append(f"unexpected tensors: {', '.join(extra[:8])}"
                         + (" ..." if len(extra) > 8 else ""))
        raise DataError(f"{origin}: weight set does not match the model "
                        f"({'; '.join(parts)})")
    for name, shape in expected.items():
        if bag[name].shape != tuple(shape):
            raise DataError(
                f"{origin}: shape mismatch for tensor {name!r}: file has "
                f"{bag[name].shape}, model needs {tuple(shape)}")


def load_checked_weights(path: str,
                         expected: Mapping[str, tuple]) -> dict[str, np.ndarray]:
    """Load a weight container and verify it matches a parameter schema."""
    got = load_weights(path)
    validate_weight_bag(got, expected, path)
    return got
