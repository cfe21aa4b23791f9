"""Finite-difference verification of every differentiable operation.

Two strategies: coordinate-wise central differences for small single-op
graphs, and a joint directional derivative for the full generator and
discriminator graphs (perturbing every leaf along a fixed random direction).
Everything runs in float64; inputs are nudged away from relu/abs kinks so the
two-sided difference sees a smooth function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import networks as nets
from .autodiff import Tensor
from .layers import (InstanceNormState, ResidualBlockConfig,
                     SpectralNormState, instance_norm, residual_block,
                     spectral_normalize)

TOLERANCE = 1e-4
_H = 1e-5

BuildFn = Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _grad_scale(analytic: Mapping[str, np.ndarray]) -> float:
    """Typical gradient magnitude, used as the relative-error floor.

    Coordinates whose true gradient is exactly zero (e.g. a bias feeding an
    instance norm) would otherwise compare finite-difference cancellation
    noise against zero and report spurious failures."""
    gmax = max((float(np.abs(g).max()) for g in analytic.values()),
               default=0.0)
    return max(1e-8, 1e-3 * gmax)


def _eval(build: BuildFn, arrays: Mapping[str, np.ndarray]) -> float:
    out = build({k: ad.tensor(v) for k, v in arrays.items()})
    return float(out.data)


def _analytic_grads(build: BuildFn, arrays: Mapping[str, np.ndarray],
                    ) -> dict[str, np.ndarray]:
    tape = ad.Tape()
    leaves = {k: tape.watch(v) for k, v in arrays.items()}
    loss = build(leaves)
    grads = tape.backward(loss)
    out = {}
    for k, t in leaves.items():
        g = grads.get(t)
        out[k] = np.zeros_like(arrays[k]) if g is None else g.data
    return out


def coordinate_check(build: BuildFn, arrays: Mapping[str, np.ndarray],
                     h: float = _H) -> float:
    """Max relative error over every coordinate of every leaf."""
    analytic = _analytic_grads(build, arrays)
    floor = _grad_scale(analytic)
    worst = 0.0
    for k, base in arrays.items():
        work = {n: a.copy() for n, a in arrays.items()}
        flat = work[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _eval(build, work)
            flat[i] = orig - h
            dn = _eval(build, work)
            flat[i] = orig
            num = (up - dn) / (2.0 * h)
            ana = analytic[k].reshape(-1)[i]
            worst = max(worst, _rel(ana, num, floor))
    return worst


def directional_check(build: BuildFn, arrays: Mapping[str, np.ndarray],
                      seed: int = 11, h: float = _H) -> float:
    """Joint directional derivative across all leaves at once."""
    rng = np.random.default_rng(seed)
    dirs = {}
    for k, a in arrays.items():
        d = rng.standard_normal(a.shape)
        dirs[k] = d / max(np.linalg.norm(d), 1e-12)
    analytic = _analytic_grads(build, arrays)
    ana = sum(float((analytic[k] * dirs[k]).sum()) for k in arrays)
    up = _eval(build, {k: arrays[k] + h * dirs[k] for k in arrays})
    dn = _eval(build, {k: arrays[k] - h * dirs[k] for k in arrays})
    num = (up - dn) / (2.0 * h)
    return _rel(ana, num)


def _nudge(a: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Push values away from zero so relu/abs kinks stay clear of the FD."""
    small = np.abs(a) < margin
    return a + np.where(small, np.where(a >= 0, 2 * margin, -2 * margin), 0.0)


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


# ---------------------------------------------------------------------------
# individual checks

def _check_conv2d() -> float:
    rng = np.random.default_rng(101)
    arrays = {"x": _rand(rng, 1, 3, 8, 8), "w": _rand(rng, 4, 3, 3, 3),
              "b": _rand(rng, 4)}
    return coordinate_check(
        lambda t: ad.sq_mean(ad.conv2d(t["x"], t["w"], t["b"], stride=2, pad=1)),
        arrays)


def _check_conv2d_transposed() -> float:
    rng = np.random.default_rng(102)
    arrays = {"x": _rand(rng, 1, 3, 4, 4), "w": _rand(rng, 3, 2, 4, 4),
              "b": _rand(rng, 2)}
    return coordinate_check(
        lambda t: ad.sq_mean(ad.conv2d_transposed(t["x"], t["w"], t["b"],
                                                  stride=2, pad=1)),
        arrays)


def _check_instance_norm() -> float:
    rng = np.random.default_rng(103)
    arrays = {"x": _rand(rng, 2, 3, 5, 5), "g": 0.5 + _rand(rng, 3) * 0.3,
              "b": _rand(rng, 3)}
    # project onto a fixed random vector: sq_mean of a normalized output is
    # nearly independent of x, which would leave nothing to check
    r = ad.tensor(_rand(rng, 2, 3, 5, 5))
    return coordinate_check(
        lambda t: ad.mean(ad.mul(instance_norm(
            t["x"], InstanceNormState(t["g"], t["b"])), r)),
        arrays)


def _check_spectral_normalize() -> float:
    rng = np.random.default_rng(104)
    w = _rand(rng, 5, 3, 3, 3)
    state = SpectralNormState.for_weight(w.shape, rng, dtype=np.float64)
    for _ in range(30):
        state.update(w)
    return coordinate_check(
        lambda t: ad.sq_mean(spectral_normalize(t["w"], state, update=False)),
        {"w": w})


def _check_activations() -> float:
    rng = np.random.default_rng(105)
    x = _nudge(_rand(rng, 2, 3, 4, 4))

    def build(t):
        s = ad.sq_mean(ad.relu(t["x"]))
        s = ad.add(s, ad.sq_mean(ad.leaky_relu(t["x"], 0.2)))
        return ad.add(s, ad.sq_mean(ad.tanh(t["x"])))

    return coordinate_check(build, {"x": x})


def _check_arithmetic() -> float:
    rng = np.random.default_rng(106)
    arrays = {"a": _rand(rng, 2, 3, 4, 4), "b": _rand(rng, 1, 3, 1, 1)}

    def build(t):
        u = ad.mul(ad.add(t["a"], t["b"]), ad.sub(ad.scale(t["a"], 1.3),
                                                  ad.shift(t["b"], 0.7)))
        return ad.mean(u)

    return coordinate_check(build, arrays)


def _check_reductions() -> float:
    rng = np.random.default_rng(107)
    x = _nudge(_rand(rng, 3, 2, 3, 3))

    def build(t):
        s = ad.mean(t["x"])
        s = ad.add(s, ad.scale(ad.reduce(t["x"], "sum"), 0.01))
        s = ad.add(s, ad.abs_mean(t["x"]))
        return ad.add(s, ad.sq_mean(t["x"]))

    return coordinate_check(build, {"x": x})


def _check_spatial() -> float:
    rng = np.random.default_rng(108)
    x = _rand(rng, 1, 2, 6, 6)

    def build(t):
        s = ad.sq_mean(ad.downsample_avg(t["x"], 2))
        s = ad.add(s, ad.sq_mean(ad.pad_zero(t["x"], 1, 2, 1, 2)))
        return ad.add(s, ad.sq_mean(ad.pad_reflect(t["x"], 2)))

    return coordinate_check(build, {"x": x})


def _check_residual_block() -> float:
    rng = np.random.default_rng(109)
    cfg = ResidualBlockConfig(channels=3)
    arrays = {"x": _rand(rng, 1, 3, 6, 6)}
    for tag in ("conv1", "conv2"):
        arrays[f"{tag}.w"] = _rand(rng, 3, 3, 3, 3) * 0.5
        arrays[f"{tag}.b"] = _rand(rng, 3) * 0.1
    for tag in ("in1", "in2"):
        arrays[f"{tag}.gamma"] = 0.8 + _rand(rng, 3) * 0.2
        arrays[f"{tag}.beta"] = 0.2 + _rand(rng, 3) * 0.1
    r = ad.tensor(_rand(rng, 1, 3, 6, 6))
    return coordinate_check(
        lambda t: ad.mean(ad.mul(residual_block(t["x"], cfg, t), r)), arrays)


def _check_adversarial_d() -> float:
    rng = np.random.default_rng(110)
    arrays = {f"r{i}": _rand(rng, 1, 1, 4 >> i, 4 >> i) for i in range(2)}
    arrays.update({f"f{i}": _rand(rng, 1, 1, 4 >> i, 4 >> i) for i in range(2)})
    return coordinate_check(
        lambda t: L.adversarial_loss_d([t["r0"], t["r1"]],
                                       [t["f0"], t["f1"]]),
        arrays)


def _check_adversarial_g() -> float:
    rng = np.random.default_rng(111)
    arrays = {f"f{i}": _rand(rng, 1, 1, 4, 4) for i in range(3)}
    return coordinate_check(
        lambda t: L.adversarial_loss_g([t["f0"], t["f1"], t["f2"]]), arrays)


def _check_feature_matching() -> float:
    rng = np.random.default_rng(112)
    arrays = {}
    for s in range(2):
        for l in range(2):
            r = _rand(rng, 1, 2, 3, 3)
            arrays[f"r{s}{l}"] = r
            arrays[f"f{s}{l}"] = r + np.sign(_rand(rng, 1, 2, 3, 3)) * 0.3
    return coordinate_check(
        lambda t: L.feature_matching_loss(
            [[t["r00"], t["r01"]], [t["r10"], t["r11"]]],
            [[t["f00"], t["f01"]], [t["f10"], t["f11"]]]),
        arrays)


def _check_pixel() -> float:
    rng = np.random.default_rng(113)
    a = _rand(rng, 1, 3, 5, 5)
    b = a + np.sign(_rand(rng, 1, 3, 5, 5)) * 0.3
    return coordinate_check(lambda t: L.pixel_loss(t["a"], t["b"]),
                            {"a": a, "b": b})


def _check_perceptual() -> float:
    rng = np.random.default_rng(114)
    ext = L.FeatureExtractor.seeded()
    coeffs = L.LossWeights().perceptual_layer_coeffs
    a = _rand(rng, 1, 3, 8, 8)
    b = _rand(rng, 1, 3, 8, 8)
    return coordinate_check(
        lambda t: L.perceptual_loss(t["a"], t["b"], ext, coeffs),
        {"a": a, "b": b})


def _dezero(params: dict[str, np.ndarray],
            rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Shift every parameter off exact zero so no activation sits exactly on
    a relu kink (zero biases/betas at a 1x1 bottleneck norm produce exact-0
    pre-activations, where a two-sided difference is meaningless)."""
    return {k: v + rng.uniform(0.02, 0.08, v.shape) * np.sign(
        rng.standard_normal(v.shape)) for k, v in params.items()}


def _check_generator_graph() -> float:
    cfg = nets.GeneratorConfig(encoder_channels=(4, 8, 8, 8, 8),
                               n_residual_blocks=1)
    rng = np.random.default_rng(115)
    params = _dezero(nets.init_weights(nets.generator_param_specs(cfg),
                                       seed=42, dtype=np.float64), rng)
    arrays = dict(params)
    arrays["x"] = _rand(rng, 1, 3, 32, 32)

    def build(t):
        p = {k: v for k, v in t.items() if k != "x"}
        return ad.sq_mean(nets.generator_forward(t["x"], p, cfg))

    return directional_check(build, arrays, h=1e-6)


def _check_discriminator_graph() -> float:
    cfg = nets.DiscriminatorConfig(base_channels=4)
    rng = np.random.default_rng(116)
    params = _dezero(nets.init_weights(nets.discriminator_param_specs(cfg),
                                       seed=43, dtype=np.float64), rng)
    sn = nets.init_sn_states(params, seed=44)
    for name, s in sn.items():
        s.u = s.u.astype(np.float64)
        s.v = s.v.astype(np.float64)
        for _ in range(10):
            s.update(params[name])
    arrays = dict(params)
    arrays["x"] = _rand(rng, 1, 3, 32, 32)

    def build(t):
        p = {k: v for k, v in t.items() if k != "x"}
        out = nets.discriminator_forward(t["x"], p, cfg, sn, update_sn=False)
        s = L.adversarial_loss_g(out.patch_maps)
        for acts in out.features:
            for a in acts:
                s = ad.add(s, ad.scale(ad.sq_mean(a), 0.01))
        return s

    return directional_check(build, arrays, h=1e-6)


CHECKS: dict[str, Callable[[], float]] = {
    "conv2d": _check_conv2d,
    "conv2d_transposed": _check_conv2d_transposed,
    "instance_norm": _check_instance_norm,
    "spectral_normalize": _check_spectral_normalize,
    "activations": _check_activations,
    "arithmetic": _check_arithmetic,
    "reductions": _check_reductions,
    "spatial_ops": _check_spatial,
    "residual_block": _check_residual_block,
    "adversarial_loss_d": _check_adversarial_d,
    "adversarial_loss_g": _check_adversarial_g,
    "feature_matching_loss": _check_feature_matching,
    "pixel_loss": _check_pixel,
    "perceptual_loss": _check_perceptual,
    "generator_graph_32": _check_generator_graph,
    "discriminator_graph_32": _check_discriminator_graph,
}


def run_gradient_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        results.append(CheckResult(name, fn()))
    return results
