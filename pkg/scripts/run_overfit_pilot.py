"""Overfit smoke pilot: train on a tiny synthetic set and record thresholds.

Builds 4 synthetic 64x64 photographs, derives underexposed (-1 EV),
overexposed (+1 EV), and identity (EV 0) inputs from each, trains with the
default config, and measures pixel L1 and PSNR against the zero-step
generator.  The resulting JSON (assets/pilot/overfit_pilot.json) freezes the
numbers the acceptance thresholds were derived from.

Usage: python scripts/run_overfit_pilot.py [--steps 2000] [--seed 0]
                                           [--out assets/pilot]
"""

import argparse
import json
import os
import sys
import tempfile
import time

import numpy as np

from exposura import autodiff as ad
from exposura.imaging import (ImageBuffer, ev_shift, format_ev_tag,
                              from_net_output, index_dataset, load_image,
                              save_image, to_net_input)
from exposura.metrics import psnr
from exposura.networks import generator_forward, watch_params
from exposura.trainer import TrainConfig, init_train_state, run_training

SMOKE_EVS = (-1.0, 1.0)


def synthetic_photo(seed: int) -> ImageBuffer:
    """A 64x64 mid-tone scene: gradient sky, textured ground, two shapes.

    Values stay within [0.15, 0.7] so a +/-1 EV shift barely clips and the
    correction task is close to invertible.
    """
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:64, 0:64] / 63.0
    horizon = 0.35 + 0.2 * float(rng.random())
    sky = 0.55 - 0.25 * y / max(horizon, 1e-3)
    ground = 0.3 + 0.08 * np.sin(2 * np.pi * (4 + seed % 3) * x)
    img = np.where(y[None] < horizon, sky[None], ground[None])
    img = np.repeat(img, 3, axis=0)
    img[1] *= 0.95
    img[2] *= 1.05

    cy, cx = rng.uniform(0.3, 0.7, 2)
    r = rng.uniform(0.1, 0.2)
    disk = (y - cy) ** 2 + (x - cx) ** 2 < r * r
    color = rng.uniform(0.25, 0.65, 3)
    for c in range(3):
        img[c][disk] = color[c]

    t, l = rng.integers(8, 40, 2)
    h, w = rng.integers(8, 20, 2)
    color = rng.uniform(0.2, 0.6, 3)
    for c in range(3):
        img[c][t:t + h, l:l + w] = color[c]

    img += rng.normal(0.0, 0.01, img.shape)
    hwc = np.clip(img.transpose(1, 2, 0), 0.15, 0.7).astype(np.float32)
    return ImageBuffer(hwc)


def build_smoke_dataset(root: str, n_stems: int = 4, seed: int = 100,
                        include_ev0: bool = True) -> None:
    """Write target/<stem>.png plus shifted and identity inputs."""
    in_dir = os.path.join(root, "input")
    tg_dir = os.path.join(root, "target")
    os.makedirs(in_dir, exist_ok=True)
    os.makedirs(tg_dir, exist_ok=True)
    for i in range(n_stems):
        base = synthetic_photo(seed + i)
        save_image(base, os.path.join(tg_dir, f"scene{i}.png"))
        evs = SMOKE_EVS + ((0.0,) if include_ev0 else ())
        for ev in evs:
            name = f"scene{i}_{format_ev_tag(ev)}.png"
            save_image(ev_shift(base, ev), os.path.join(in_dir, name))


def evaluate_pairs(state, index) -> dict:
    """Full-image pixel L1 and PSNR per pair, keyed by exposure group."""
    cfg = state.config
    params = watch_params(ad.Tape(), state.g_params)
    out = {"shifted": {"l1": [], "psnr": []}, "ev0": {"l1": [], "psnr": []}}
    for rec in index.records:
        x = to_net_input(load_image(rec.input_path))
        target = load_image(rec.target_path)
        ty = to_net_input(target)
        y = generator_forward(ad.tensor(x), params, cfg.generator)
        l1 = float(np.mean(np.abs(y.data - ty)))
        p = psnr(from_net_output(y.data), target)
        group = "ev0" if rec.ev == 0 else "shifted"
        out[group]["l1"].append(l1)
        out[group]["psnr"].append(p)
    return {g: {"pixel_l1": float(np.mean(v["l1"])),
                "psnr": float(np.mean(v["psnr"]))}
            for g, v in out.items() if v["l1"]}


def run_pilot(data_root: str, out_dir: str, steps: int, seed: int) -> dict:
    build_smoke_dataset(data_root)
    index = index_dataset(data_root)

    cfg = TrainConfig(steps=steps, seed=seed)
    zero_state = init_train_state(cfg)
    before = evaluate_pairs(zero_state, index)

    t0 = time.perf_counter()
    run_dir = os.path.join(out_dir, "run")
    state, records = run_training(cfg, index, run_dir, log=print)
    elapsed = time.perf_counter() - t0
    after = evaluate_pairs(state, index)

    result = {
        "config": {"steps": cfg.steps, "seed": cfg.seed,
                   "crop_size": cfg.crop_size, "batch_size": cfg.batch_size,
                   "lr_g": cfg.lr_g, "lr_d": cfg.lr_d},
        "dataset": {"stems": 4, "evs": list(SMOKE_EVS), "includes_ev0": True},
        "step0": before,
        "final": after,
        "pixel_l1_ratio": after["shifted"]["pixel_l1"]
        / before["shifted"]["pixel_l1"],
        "psnr_gain_db": after["shifted"]["psnr"] - before["shifted"]["psnr"],
        "identity_margin": after["shifted"]["pixel_l1"]
        - after["ev0"]["pixel_l1"],
        "runtime_seconds": round(elapsed, 1),
        "loss_head": [records[0].values()],
        "loss_tail": [r.values() for r in records[-3:]],
    }
    return result


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="assets/pilot")
    ap.add_argument("--data-dir", default=None,
                    help="where to build the synthetic set (default: temp)")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    if args.data_dir:
        data_root = args.data_dir
        result = run_pilot(data_root, args.out, args.steps, args.seed)
    else:
        with tempfile.TemporaryDirectory() as data_root:
            result = run_pilot(data_root, args.out, args.steps, args.seed)

    path = os.path.join(args.out, "overfit_pilot.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    print(json.dumps({k: result[k] for k in
                      ("pixel_l1_ratio", "psnr_gain_db", "identity_margin",
                       "runtime_seconds")}, indent=2))
    print(f"pilot record written to {path}")
    ok = (result["pixel_l1_ratio"] < 0.25 and result["psnr_gain_db"] >= 10.0
          and result["identity_margin"] >= 0.0)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
