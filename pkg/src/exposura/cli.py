"""Command-line front end.

Subcommands: train, infer, eval, simulate-ev, matting-eval, fit-pristine,
gradcheck.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.  Unknown flags are fatal.  All report and image writes go through
write-to-temp plus atomic rename, so a failing run never leaves a partial
file behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys

import numpy as np

from . import autodiff as ad
from .checkpoint import load_weights
from .errors import DataError, NumericError, UsageError
from .gradcheck import TOLERANCE, run_gradient_checks
from .imaging import (ImageBuffer, crop_to, ev_shift, format_ev_tag,
                      from_net_output, index_dataset, load_image,
                      pad_to_multiple, save_image, to_net_input)
from .metrics import (ImageRecord, MetricReport, matting_error, pi, psnr,
                      ssim)
from .networks import (GeneratorConfig, expected_param_shapes,
                       generator_forward, generator_param_specs,
                       validate_weight_bag)
from .niqe import PristineModel, fit_pristine, niqe
from .trainer import TrainConfig, load_train_config, run_training

IMAGE_EXTENSIONS = (".png", ".imgf")


class _Parser(argparse.ArgumentParser):
    """Argparse that reports problems through the exit-code contract."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        # let values like "-1,0,+1" pass as arguments, not flags
        self._negative_number_matcher = re.compile(r"^-\d")

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# small helpers

def _list_images(dirpath: str) -> list[str]:
    if not os.path.isdir(dirpath):
        raise DataError(f"{dirpath} is not a directory")
    names = sorted(n for n in os.listdir(dirpath)
                   if os.path.splitext(n)[1].lower() in IMAGE_EXTENSIONS)
    if not names:
        raise DataError(f"{dirpath} contains no .png or .imgf images")
    return names


def _atomic_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned text table: first column left-aligned, the rest right."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def fmt(cells):
        parts = [cells[0].ljust(widths[0])]
        parts += [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    lines = [fmt(headers), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


def _resolve_threads(flag_value: int | None) -> int | None:
    if flag_value is None:
        env = os.environ.get("EXPOSURA_THREADS")
        if env is None:
            return None
        try:
            flag_value = int(env)
        except ValueError:
            raise UsageError(
                f"EXPOSURA_THREADS must be an integer, got {env!r}") from None
    if flag_value < 1:
        raise UsageError(f"--threads must be >= 1, got {flag_value}")
    return flag_value


def _apply_threads(n: int | None) -> None:
    """Cap kernel worker threads.  Image loops here run sequentially in
    index order regardless, so thread count never changes results."""
    if n is None:
        return
    try:
        import numba
    except ImportError:
        return
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _fmt_float(v: float) -> str:
    if v != v:
        return "nan"
    if v in (float("inf"), float("-inf")):
        return "inf" if v > 0 else "-inf"
    return f"{v:.4f}"


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    index = index_dataset(args.data_root)
    state, records = run_training(cfg, index, args.out,
                                  resume_from=args.checkpoint, log=print)
    last = records[-1]
    print(f"finished at step {state.step}: "
          f"adv_d={last.adv_d:.6f} adv_g={last.adv_g:.6f} fm={last.fm:.6f} "
          f"pixel={last.pixel:.6f} perceptual={last.perceptual:.6f}")
    return 0


# ---------------------------------------------------------------------------
# infer

def _load_generator(checkpoint: str, cfg: GeneratorConfig,
                    ) -> dict[str, ad.Tensor]:
    bag = load_weights(checkpoint)
    gbag = {k: v for k, v in bag.items() if k.startswith("g.")}
    if not gbag:
        raise DataError(f"{checkpoint}: no generator tensors (g.*) present")
    expected = expected_param_shapes(generator_param_specs(cfg))
    validate_weight_bag(gbag, expected, checkpoint)
    return {k: ad.tensor(v) for k, v in gbag.items()}


def infer_image(img: ImageBuffer, params: dict[str, ad.Tensor],
                cfg: GeneratorConfig) -> ImageBuffer:
    """Pad to the network's stride multiple, run the generator, crop back."""
    padded, size = pad_to_multiple(img, 32)
    y = generator_forward(ad.tensor(to_net_input(padded)), params, cfg)
    return crop_to(from_net_output(y.data), size)


def cmd_infer(args) -> int:
    cfg = (load_train_config(args.config).generator if args.config
           else GeneratorConfig())
    params = _load_generator(args.checkpoint, cfg)
    names = _list_images(args.data_root)
    os.makedirs(args.out, exist_ok=True)
    for name in names:
        img = load_image(os.path.join(args.data_root, name))
        out = infer_image(img, params, cfg)
        save_image(out, os.path.join(args.out, name))
    print(f"wrote {len(names)} corrected images to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _read_ma_scores(path: str) -> dict[str, float]:
    """CSV of image,score rows; a non-numeric first row is treated as a
    header."""
    scores: dict[str, float] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read ma-scores file {path}: {e}") from e
    for i, line in enumerate(lines):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 2:
            raise DataError(f"{path}:{i + 1}: expected 'image,score', "
                            f"got {line!r}")
        try:
            val = float(cells[1])
        except ValueError:
            if i == 0:
                continue
            raise DataError(f"{path}:{i + 1}: score {cells[1]!r} is not a "
                            f"number") from None
        if cells[0] in scores:
            raise DataError(f"{path}: duplicate image {cells[0]!r}")
        scores[cells[0]] = val
    return scores


def cmd_eval(args) -> int:
    pred_names = set(_list_images(args.pred_dir))
    gt_names = set(_list_images(args.gt_dir))
    if pred_names != gt_names:
        only_pred = sorted(pred_names - gt_names)
        only_gt = sorted(gt_names - pred_names)
        parts = []
        if only_pred:
            parts.append(f"only in {args.pred_dir}: {', '.join(only_pred)}")
        if only_gt:
            parts.append(f"only in {args.gt_dir}: {', '.join(only_gt)}")
        raise DataError("prediction/ground-truth filenames do not match "
                        f"({'; '.join(parts)})")

    if args.ma_scores and not args.pristine_model:
        raise UsageError("--ma-scores requires --pristine-model (the "
                         "perceptual index needs both scores)")
    model = PristineModel.load(args.pristine_model) \
        if args.pristine_model else None
    ma = _read_ma_scores(args.ma_scores) if args.ma_scores else None
    names = sorted(pred_names)
    if ma is not None:
        missing = [n for n in names if n not in ma]
        if missing:
            raise DataError(f"{args.ma_scores}: no score for: "
                            f"{', '.join(missing)}")

    records = []
    for name in names:
        a = load_image(os.path.join(args.pred_dir, name))
        b = load_image(os.path.join(args.gt_dir, name))
        rec = ImageRecord(image_id=name, psnr=psnr(a, b), ssim=ssim(a, b))
        if model is not None:
            rec.niqe = niqe(a, model)
            if ma is not None:
                rec.pi = pi(rec.niqe, ma[name])
        records.append(rec)

    report = MetricReport(records, metadata={"kind": "image-quality"})
    os.makedirs(args.out, exist_ok=True)
    report.save_csv(os.path.join(args.out, "report.csv"))
    report.save_json(os.path.join(args.out, "report.json"))

    cols = report.columns()
    rows = [[r.image_id] + [_metric_cell(getattr(r, c)) for c in cols]
            for r in records]
    agg = report.aggregate()
    rows.append(["aggregate"] + [_metric_cell(agg[c]) for c in cols])
    print(_render_table(["image"] + cols, rows))
    return 0


def _metric_cell(v: float | None) -> str:
    return "" if v is None else _fmt_float(v)


# ---------------------------------------------------------------------------
# simulate-ev

def _parse_evs(spec: str) -> list[float]:
    evs = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            evs.append(float(item))
        except ValueError:
            raise UsageError(f"--evs: {item!r} is not a number") from None
    if not evs:
        raise UsageError("--evs lists no values")
    return evs


def cmd_simulate_ev(args) -> int:
    evs = _parse_evs(args.evs)
    names = _list_images(args.data_root)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for name in names:
        stem, ext = os.path.splitext(name)
        img = load_image(os.path.join(args.data_root, name))
        for ev in evs:
            out_name = f"{stem}_{format_ev_tag(ev)}{ext}"
            save_image(ev_shift(img, ev), os.path.join(args.out, out_name))
            written.append(out_name)
    meta = {"exposure_model": "ev-sim v1", "evs": evs, "outputs": written}
    _atomic_text(os.path.join(args.out, "simulate_ev.json"),
                 json.dumps(meta, indent=2) + "\n")
    print(f"wrote {len(written)} images ({len(evs)} exposure values x "
          f"{len(names)} inputs) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# matting-eval

def _read_matting_manifest(path: str) -> list[dict]:
    """CSV with header dataset,condition,ev,image,pred; condition E or C."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    lines = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"manifest {path} is empty")
    header = [c.strip() for c in lines[0].split(",")]
    expected = ["dataset", "condition", "ev", "image", "pred"]
    if header != expected:
        raise DataError(f"manifest {path} header must be "
                        f"{','.join(expected)}, got {lines[0]!r}")
    rows = []
    seen = set()
    problems = []
    for i, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 5:
            problems.append(f"line {i}: expected 5 fields, got {len(cells)}")
            continue
        dataset, condition, ev_text, image, pred = cells
        if condition not in ("E", "C"):
            problems.append(f"line {i}: condition must be E or C, "
                            f"got {condition!r}")
            continue
        try:
            ev = float(ev_text)
        except ValueError:
            problems.append(f"line {i}: ev {ev_text!r} is not a number")
            continue
        key = (dataset, condition, ev, image)
        if key in seen:
            problems.append(f"line {i}: duplicate entry {key}")
            continue
        seen.add(key)
        rows.append({"dataset": dataset, "condition": condition, "ev": ev,
                     "image": image, "pred": pred})
    if problems:
        raise DataError(f"manifest {path} is malformed:\n  "
                        + "\n  ".join(problems))
    return rows


def cmd_matting_eval(args) -> int:
    rows = _read_matting_manifest(args.manifest)

    holes = []
    for row in rows:
        pred_path = os.path.join(args.pred_root, row["pred"])
        gt_path = os.path.join(args.gt_dir, row["image"])
        if not os.path.isfile(pred_path):
            holes.append(f"missing prediction {pred_path}")
        if not os.path.isfile(gt_path):
            holes.append(f"missing ground truth {gt_path}")
    if holes:
        raise DataError(f"manifest {args.manifest} has holes:\n  "
                        + "\n  ".join(sorted(set(holes))))

    for row in rows:
        a = load_image(os.path.join(args.pred_root, row["pred"]))
        b = load_image(os.path.join(args.gt_dir, row["image"]))
        row["mse"], row["mae"] = matting_error(a, b)

    groups: dict[tuple[str, str], dict[float, list[dict]]] = {}
    for row in rows:
        cell = groups.setdefault((row["dataset"], row["condition"]), {})
        cell.setdefault(row["ev"], []).append(row)
    evs = sorted({row["ev"] for row in rows})

    # cell value = mean over that cell's images; Avg = mean of the row's
    # per-EV cell values, so each exposure level carries equal weight
    grid = []
    row_order = sorted(groups, key=lambda k: (k[0], k[1] != "E"))
    for (dataset, condition) in row_order:
        cells = groups[(dataset, condition)]
        entry = {"dataset": dataset, "condition": condition, "cells": {}}
        for ev in evs:
            if ev not in cells:
                continue
            members = cells[ev]
            entry["cells"][ev] = {
                "n": len(members),
                "mse": float(np.mean([m["mse"] for m in members])),
                "mae": float(np.mean([m["mae"] for m in members])),
            }
        vals = entry["cells"].values()
        entry["avg"] = {
            "mse": float(np.mean([v["mse"] for v in vals])),
            "mae": float(np.mean([v["mae"] for v in vals])),
        }
        grid.append(entry)

    os.makedirs(args.out, exist_ok=True)
    csv_lines = ["dataset,condition,ev,n_images,mse_x1000,mae_x1000"]
    for entry in grid:
        for ev in evs:
            cell = entry["cells"].get(ev)
            if cell is None:
                continue
            csv_lines.append(
                f"{entry['dataset']},{entry['condition']},{ev:g},"
                f"{cell['n']},{cell['mse']:.9g},{cell['mae']:.9g}")
        csv_lines.append(
            f"{entry['dataset']},{entry['condition']},avg,,"
            f"{entry['avg']['mse']:.9g},{entry['avg']['mae']:.9g}")
    _atomic_text(os.path.join(args.out, "matting_report.csv"),
                 "\n".join(csv_lines) + "\n")

    json_obj = {
        "metadata": {"metric": "matting MSE/MAE", "scale": "x1000"},
        "evs": evs,
        "rows": [{
            "dataset": e["dataset"], "condition": e["condition"],
            "cells": {f"{ev:g}": c for ev, c in e["cells"].items()},
            "avg": e["avg"],
        } for e in grid],
    }
    _atomic_text(os.path.join(args.out, "matting_report.json"),
                 json.dumps(json_obj, indent=2) + "\n")

    headers = (["dataset", "cond"] + [f"{ev:g}" for ev in evs] + ["Avg"])
    table_rows = []
    for e in grid:
        def cell_text(c):
            return "" if c is None else f"{c['mse']:.2f}/{c['mae']:.2f}"
        table_rows.append(
            [e["dataset"], e["condition"]]
            + [cell_text(e["cells"].get(ev)) for ev in evs]
            + [f"{e['avg']['mse']:.2f}/{e['avg']['mae']:.2f}"])
    print("matting MSE/MAE x1000 (lower is better)")
    print(_render_table(headers, table_rows))
    return 0


# ---------------------------------------------------------------------------
# fit-pristine

def cmd_fit_pristine(args) -> int:
    names = _list_images(args.data_root)
    images = [load_image(os.path.join(args.data_root, n)) for n in names]
    model = fit_pristine(images)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    model.save(args.out)
    print(f"fit naturalness model from {len(images)} images -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    results = run_gradient_checks()
    rows = [[r.name, f"{r.max_rel_error:.3e}", f"{r.tolerance:.0e}",
             "PASS" if r.passed else "FAIL"] for r in results]
    print(_render_table(["check", "max rel error", "tolerance", "status"],
                        rows))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(
            f"{len(failed)} gradient check(s) above {TOLERANCE:g}: "
            + ", ".join(failed))
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="exposura",
                     description="Exposure-correction toolkit")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--threads", type=int, default=None,
                       help="cap kernel worker threads "
                            "(default: EXPOSURA_THREADS or library default)")
        return p

    p = add("train", cmd_train, "train the correction networks")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--data-root", required=True,
                   help="dataset root with input/ and target/ directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = add("infer", cmd_infer, "run the generator over a directory")
    p.add_argument("--checkpoint", required=True, help="trained weights")
    p.add_argument("--config",
                   help="training config that matches the checkpoint "
                        "(defaults to the stock architecture)")
    p.add_argument("--data-root", required=True, help="input image directory")
    p.add_argument("--out", required=True, help="output image directory")

    p = add("eval", cmd_eval, "full-reference and no-reference metrics")
    p.add_argument("pred_dir", help="directory of predicted images")
    p.add_argument("gt_dir", help="directory of ground-truth images")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--pristine-model",
                   help="naturalness model file; adds the NIQE column")
    p.add_argument("--ma-scores",
                   help="CSV of image,score rows; adds the PI column")

    p = add("simulate-ev", cmd_simulate_ev,
            "write exposure-shifted copies with tag-grammar names")
    p.add_argument("--data-root", required=True, help="input image directory")
    p.add_argument("--evs", required=True,
                   help="comma-separated exposure shifts, e.g. '-1,0,+1'")
    p.add_argument("--out", required=True, help="output directory")

    p = add("matting-eval", cmd_matting_eval,
            "grid of matting MSE/MAE x1000 per condition and exposure")
    p.add_argument("pred_root", help="root for manifest prediction paths")
    p.add_argument("gt_dir", help="directory of ground-truth mattes")
    p.add_argument("manifest",
                   help="CSV with header dataset,condition,ev,image,pred")
    p.add_argument("--out", required=True, help="report directory")

    p = add("fit-pristine", cmd_fit_pristine,
            "fit the naturalness model from clean photographs")
    p.add_argument("--data-root", required=True,
                   help="directory of pristine images")
    p.add_argument("--out", required=True, help="model file to write")

    add("gradcheck", cmd_gradcheck,
        "finite-difference audit of every differentiable operation")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "subcommand", None):
            parser.print_usage(sys.stderr)
            return 1
        _apply_threads(_resolve_threads(args.threads))
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
