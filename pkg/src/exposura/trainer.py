"""Alternating GAN optimization with deterministic, resumable state.

Every random decision in a run is derived functionally: parameter init from
(seed, 0, k) and step t's sampling from (seed, t + 1).  Resuming therefore
needs only the step counter next to the weights, and an interrupted run
replays the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels as K
from .checkpoint import load_weights, save_weights
from .errors import DataError, NumericError
from .imaging import (DatasetIndex, ImageBuffer, hflip_pair, load_image,
                      random_crop_pair, to_net_input)
from .layers import SpectralNormState
from .losses import (FeatureExtractor, GeneratorLossParts, LossWeights,
                     adversarial_loss_d, adversarial_loss_g,
                     feature_matching_loss, perceptual_loss, pixel_loss,
                     total_generator_loss)
from .networks import (DiscriminatorConfig, GeneratorConfig,
                       discriminator_forward, discriminator_param_specs,
                       generator_forward, generator_param_specs,
                       init_sn_states, init_weights, watch_params)

ADAM_EPS = 1e-8
LOSS_CSV_HEADER = "step,adv_d,adv_g,fm,pixel,perceptual"


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    crop_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 500
    loss_weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    perceptual_weights: str | None = None
    isolation_check: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size < 32 or self.crop_size % 32:
            raise ValueError(f"crop_size must be a positive multiple of 32, "
                             f"got {self.crop_size}")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


_INT_KEYS = {"steps", "batch_size", "crop_size", "seed", "checkpoint_every",
             "n_residual_blocks", "d_base_channels"}
_FLOAT_KEYS = {"lr_g", "lr_d", "adam_beta1", "adam_beta2", "lambda_pixel",
               "beta_perceptual", "lambda_fm"}
_STR_KEYS = {"perceptual_weights"}
_BOOL_KEYS = {"isolation_check"}
_LIST_KEYS = {"encoder_channels"}


def parse_train_config(text: str, origin: str = "<config>") -> TrainConfig:
    """Build a TrainConfig from key=value lines ('#' starts a comment)."""
    plain: dict[str, object] = {}
    lw: dict[str, float] = {}
    gen: dict[str, object] = {}
    dis: dict[str, object] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{origin}:{ln}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                parsed: object = int(val)
            elif key in _FLOAT_KEYS:
                parsed = float(val)
            elif key in _STR_KEYS:
                parsed = val
            elif key in _BOOL_KEYS:
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(val)
                parsed = val.lower() in ("true", "1")
            elif key in _LIST_KEYS:
                parsed = tuple(int(v) for v in val.split(","))
            else:
                raise DataError(f"{origin}:{ln}: unknown config key {key!r}")
        except ValueError as e:
            raise DataError(f"{origin}:{ln}: bad value for {key}: {val!r}") from e
        if key in ("lambda_pixel", "beta_perceptual", "lambda_fm"):
            lw[key] = parsed  # type: ignore[assignment]
        elif key == "encoder_channels":
            gen["encoder_channels"] = parsed
        elif key == "n_residual_blocks":
            gen["n_residual_blocks"] = parsed
        elif key == "d_base_channels":
            dis["base_channels"] = parsed
        else:
            plain[key] = parsed
    try:
        return TrainConfig(loss_weights=LossWeights(**lw),
                           generator=GeneratorConfig(**gen),
                           discriminator=DiscriminatorConfig(**dis),
                           **plain)  # type: ignore[arg-type]
    except ValueError as e:
        raise DataError(f"{origin}: {e}") from e


def load_train_config(path: str) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    return parse_train_config(text, origin=path)


@dataclass
class TrainState:
    step: int
    g_params: dict[str, np.ndarray]
    d_params: dict[str, np.ndarray]
    g_m: dict[str, np.ndarray]
    g_v: dict[str, np.ndarray]
    d_m: dict[str, np.ndarray]
    d_v: dict[str, np.ndarray]
    sn_states: dict[str, SpectralNormState]
    config: TrainConfig
    extractor: FeatureExtractor


@dataclass
class LossRecord:
    step: int
    adv_d: float
    adv_g: float
    fm: float
    pixel: float
    perceptual: float

    def values(self) -> dict[str, float]:
        return {"adv_d": self.adv_d, "adv_g": self.adv_g, "fm": self.fm,
                "pixel": self.pixel, "perceptual": self.perceptual}


def _zeros_like_bag(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def init_train_state(cfg: TrainConfig) -> TrainState:
    g = init_weights(generator_param_specs(cfg.generator), (cfg.seed, 0, 0))
    d = init_weights(discriminator_param_specs(cfg.discriminator),
                     (cfg.seed, 0, 1))
    sn = init_sn_states(d, (cfg.seed, 0, 2))
    if cfg.perceptual_weights:
        extractor = FeatureExtractor.from_file(cfg.perceptual_weights)
    else:
        extractor = FeatureExtractor.seeded()
    return TrainState(step=0, g_params=g, d_params=d,
                      g_m=_zeros_like_bag(g), g_v=_zeros_like_bag(g),
                      d_m=_zeros_like_bag(d), d_v=_zeros_like_bag(d),
                      sn_states=sn, config=cfg, extractor=extractor)


# ---------------------------------------------------------------------------
# serialization

def save_train_state(state: TrainState, path: str) -> None:
    bag: dict[str, np.ndarray] = {}
    bag.update(state.g_params)
    bag.update(state.d_params)
    for prefix, m in (("opt.g.m.", state.g_m), ("opt.g.v.", state.g_v),
                      ("opt.d.m.", state.d_m), ("opt.d.v.", state.d_v)):
        for k, v in m.items():
            bag[prefix + k] = v
    for k, s in state.sn_states.items():
        bag[f"sn.u.{k}"] = s.u
        bag[f"sn.v.{k}"] = s.v
    save_weights(path, bag)
    side = {"step": state.step, "seed": state.config.seed}
    tmp = path + ".json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(side, fh)
    os.replace(tmp, path + ".json")


def load_train_state(path: str, cfg: TrainConfig) -> TrainState:
    bag = load_weights(path)
    sidecar = path + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            side = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read checkpoint sidecar {sidecar}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{sidecar}: invalid JSON: {e}") from e

    g_specs = generator_param_specs(cfg.generator)
    d_specs = discriminator_param_specs(cfg.discriminator)
    state = init_train_state(cfg)

    def take(name: str, expected_shape: tuple[int, ...]) -> np.ndarray:
        if name not in bag:
            raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
        arr = bag[name]
        if arr.shape != tuple(expected_shape):
            raise DataError(f"{path}: shape mismatch for tensor {name!r}: "
                            f"file has {arr.shape}, model needs "
                            f"{tuple(expected_shape)}")
        return arr

    for name, spec in g_specs.items():
        state.g_params[name] = take(name, spec.shape)
        state.g_m[name] = take("opt.g.m." + name, spec.shape)
        state.g_v[name] = take("opt.g.v." + name, spec.shape)
    for name, spec in d_specs.items():
        state.d_params[name] = take(name, spec.shape)
        state.d_m[name] = take("opt.d.m." + name, spec.shape)
        state.d_v[name] = take("opt.d.v." + name, spec.shape)
    for name, s in state.sn_states.items():
        s.u = take(f"sn.u.{name}", s.u.shape)
        s.v = take(f"sn.v.{name}", s.v.shape)
    state.step = int(side["step"])
    return state


# ---------------------------------------------------------------------------
# optimization

def _adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 m: dict[str, np.ndarray], v: dict[str, np.ndarray],
                 lr: float, b1: float, b2: float, t: int) -> None:
    """In-place Adam step; t is 1-based.  Parameter order is fixed by the
    params dict, so the update sequence is reproducible."""
    c1 = np.float32(1.0 - b1 ** t)
    c2 = np.float32(1.0 - b2 ** t)
    f_lr = np.float32(lr)
    f_b1 = np.float32(b1)
    f_b2 = np.float32(b2)
    eps = np.float32(ADAM_EPS)
    for name, g in grads.items():
        K.adam_step(params[name], g, m[name], v[name],
                    f_lr, f_b1, f_b2, c1, c2, eps)


def _bag_digest(bag: dict[str, np.ndarray]) -> int:
    crc = 0
    for name in sorted(bag):
        a = np.ascontiguousarray(bag[name]).reshape(-1)
        stride = max(1, a.size // 4096)
        crc = zlib.crc32(a[::stride].tobytes(), crc)
        crc = zlib.crc32(repr(bag[name].shape).encode(), crc)
    return crc


def _check_finite(record: LossRecord) -> None:
    for name, val in record.values().items():
        if not np.isfinite(val):
            raise NumericError(
                f"non-finite {name} loss ({val}) at step {record.step}; "
                f"aborting before the weights are poisoned")


def _batch_arrays(batch: list[tuple[ImageBuffer, ImageBuffer]],
                  ) -> tuple[np.ndarray, np.ndarray]:
    xs = np.concatenate([to_net_input(a) for a, _ in batch], axis=0)
    ys = np.concatenate([to_net_input(b) for _, b in batch], axis=0)
    return xs, ys


def train_step(state: TrainState,
               batch: list[tuple[ImageBuffer, ImageBuffer]]) -> LossRecord:
    """One discriminator update on detached fakes, then one generator update.

    Mutates ``state`` in place and returns the component losses.  Spectral
    norm u/v advance one power iteration, during the D(real) pass only.
    """
    if not batch:
        raise ValueError("train_step requires a nonempty batch")
    cfg = state.config
    t = state.step + 1
    xs, ys = _batch_arrays(batch)

    # One generator forward serves both halves: the D half sees the values
    # detached, the G half reuses the same tape nodes.  G parameters do not
    # change until after the G backward, so the values are the ones a second
    # forward would produce anyway.
    g_tape = ad.Tape()
    g_t = watch_params(g_tape, state.g_params)
    x_t = ad.tensor(xs)
    y_t = ad.tensor(ys)
    fake = generator_forward(x_t, g_t, cfg.generator)

    # --- discriminator half-step (fakes detached: gradients stop at G)
    g_before = _bag_digest(state.g_params) if cfg.isolation_check else 0
    tape = ad.Tape()
    d_t = watch_params(tape, state.d_params)
    out_real = discriminator_forward(ad.tensor(ys), d_t, cfg.discriminator,
                                     state.sn_states, update_sn=True)
    out_fake = discriminator_forward(fake.detach(), d_t, cfg.discriminator,
                                     state.sn_states, update_sn=False)
    loss_d = adversarial_loss_d(out_real.patch_maps, out_fake.patch_maps)
    adv_d = loss_d.item()
    grads = tape.backward(loss_d)
    d_grads = {}
    for k, v in d_t.items():
        gt = grads.get(v)
        if gt is not None:
            d_grads[k] = gt.data
    _adam_update(state.d_params, d_grads, state.d_m, state.d_v,
                 cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2, t)
    if cfg.isolation_check and _bag_digest(state.g_params) != g_before:
        raise AssertionError(
            f"discriminator half-step mutated generator parameters at step {t}")

    # --- generator half-step (against the just-updated discriminator)
    d_before = _bag_digest(state.d_params) if cfg.isolation_check else 0
    tape = g_tape
    d_const = {k: ad.tensor(v) for k, v in state.d_params.items()}
    out_fake = discriminator_forward(fake, d_const, cfg.discriminator,
                                     state.sn_states, update_sn=False)
    out_real = discriminator_forward(y_t, d_const, cfg.discriminator,
                                     state.sn_states, update_sn=False)
    parts = GeneratorLossParts(
        adversarial=adversarial_loss_g(out_fake.patch_maps),
        feature_matching=feature_matching_loss(out_real.features,
                                               out_fake.features),
        pixel=pixel_loss(fake, y_t),
        perceptual=perceptual_loss(fake, y_t, state.extractor,
                                   cfg.loss_weights.perceptual_layer_coeffs))
    total = total_generator_loss(parts, cfg.loss_weights)
    record = LossRecord(step=t, adv_d=adv_d,
                        adv_g=parts.adversarial.item(),
                        fm=parts.feature_matching.item(),
                        pixel=parts.pixel.item(),
                        perceptual=parts.perceptual.item())
    _check_finite(record)
    grads = tape.backward(total)
    g_grads = {}
    for k, v in g_t.items():
        gt = grads.get(v)
        if gt is not None:
            g_grads[k] = gt.data
    _adam_update(state.g_params, g_grads, state.g_m, state.g_v,
                 cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2, t)
    if cfg.isolation_check and _bag_digest(state.d_params) != d_before:
        raise AssertionError(
            f"generator half-step mutated discriminator parameters at step {t}")

    state.step = t
    return record


# ---------------------------------------------------------------------------
# data plumbing and the outer loop

class PairCache:
    """Decoded image pairs for a dataset index, validated for training."""

    def __init__(self, index: DatasetIndex, crop_size: int):
        if not index.records:
            raise DataError("dataset index is empty")
        self.pairs: list[tuple[ImageBuffer, ImageBuffer]] = []
        target_cache: dict[str, ImageBuffer] = {}
        for rec in index.records:
            inp = load_image(rec.input_path)
            if rec.target_path not in target_cache:
                target_cache[rec.target_path] = load_image(rec.target_path)
            tgt = target_cache[rec.target_path]
            if inp.channels != 3 or tgt.channels != 3:
                raise DataError(f"training pair {rec.input_path} must be "
                                f"3-channel on both sides")
            if inp.data.shape != tgt.data.shape:
                raise DataError(
                    f"pair dimensions differ: {rec.input_path} is "
                    f"{inp.width}x{inp.height}, target {rec.target_path} is "
                    f"{tgt.width}x{tgt.height}")
            if inp.height < crop_size or inp.width < crop_size:
                raise DataError(f"{rec.input_path} is {inp.width}x"
                                f"{inp.height}, smaller than crop_size "
                                f"{crop_size}")
            self.pairs.append((inp, tgt))

    def __len__(self) -> int:
        return len(self.pairs)


def draw_batch(cache: PairCache, cfg: TrainConfig,
               step: int) -> list[tuple[ImageBuffer, ImageBuffer]]:
    """Sample, crop and flip batch_size pairs; fully determined by
    (seed, step)."""
    rng = np.random.default_rng((cfg.seed, step + 1))
    idx = rng.integers(0, len(cache), size=cfg.batch_size)
    batch = []
    for i in idx:
        a, b = cache.pairs[int(i)]
        a, b = random_crop_pair(a, b, cfg.crop_size, rng)
        a, b = hflip_pair(a, b, rng)
        batch.append((a, b))
    return batch


def _write_loss_csv(path: str, records: list[LossRecord]) -> None:
    lines = [LOSS_CSV_HEADER]
    for r in records:
        lines.append(f"{r.step},{r.adv_d:.8g},{r.adv_g:.8g},{r.fm:.8g},"
                     f"{r.pixel:.8g},{r.perceptual:.8g}")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _read_loss_csv(path: str, up_to_step: int) -> list[LossRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines[1:]:
        parts = line.split(",")
        rec = LossRecord(int(parts[0]), *(float(p) for p in parts[1:6]))
        if rec.step <= up_to_step:
            records.append(rec)
    return records


def run_training(cfg: TrainConfig, index: DatasetIndex, out_dir: str,
                 resume_from: str | None = None,
                 log=None) -> tuple[TrainState, list[LossRecord]]:
    """Train for cfg.steps total steps, checkpointing along the way.

    ``resume_from`` continues an earlier run's checkpoint; the combined
    trajectory is bitwise identical to a single uninterrupted run.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.unlink(probe)
    except OSError as e:
        raise DataError(f"output directory {out_dir} is not writable: {e}") from e

    cache = PairCache(index, cfg.crop_size)
    if resume_from is not None:
        state = load_train_state(resume_from, cfg)
        if state.step >= cfg.steps:
            raise DataError(f"checkpoint {resume_from} is already at step "
                            f"{state.step} >= steps={cfg.steps}")
    else:
        state = init_train_state(cfg)

    csv_path = os.path.join(out_dir, "loss_curve.csv")
    records: list[LossRecord] = []
    if resume_from is not None and os.path.exists(csv_path):
        records = _read_loss_csv(csv_path, state.step)

    while state.step < cfg.steps:
        batch = draw_batch(cache, cfg, state.step)
        rec = train_step(state, batch)
        records.append(rec)
        if log is not None and (rec.step % 50 == 0 or rec.step == 1):
            log(f"step {rec.step}/{cfg.steps} adv_d={rec.adv_d:.4f} "
                f"adv_g={rec.adv_g:.4f} fm={rec.fm:.4f} "
                f"pixel={rec.pixel:.4f} perceptual={rec.perceptual:.4f}")
        if rec.step % cfg.checkpoint_every == 0 and rec.step < cfg.steps:
            save_train_state(state, os.path.join(
                out_dir, f"checkpoint_{rec.step:06d}.expw"))
            _write_loss_csv(csv_path, records)

    final_path = os.path.join(out_dir, f"checkpoint_{state.step:06d}.expw")
    save_train_state(state, final_path)
    _write_loss_csv(csv_path, records)
    return state, records
