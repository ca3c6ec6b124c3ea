"""``saccader`` command line: train, eval, ablate, bench, visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .data import Dataset, generate_glyph_dataset, load_image_folder, read_pnm, write_pnm
from .model import SaccadicModel, build_model
from .pipeline import (
    EVAL_MODES,
    evaluate,
    fixation_grid_ablation,
    format_matrix,
    runtime_bench,
    train,
)
from .saccade import refine_priority, render_priority_progression, sample_fixations

CHECKPOINT_NAME = "model.sacc"
METRICS_NAME = "metrics.csv"
RESOLVED_NAME = "config.txt"
RESULTS_NAME = "results.jsonl"


class UsageError(Exception):
    pass


# flag -> config key
_OVERRIDES = {
    "seed": "seed",
    "epochs": "epochs",
    "n_train": "n_train",
    "n_test": "n_test",
    "nms_sigma": "nms_sigma",
    "nms_strength": "nms_strength",
    "temperature": "temperature",
}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--mode", default="saccadic")
    p.add_argument("--nms-sigma", dest="nms_sigma", type=float)
    p.add_argument("--nms-strength", dest="nms_strength", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--disable-position-bias", dest="disable_position_bias", action="store_true")
    p.add_argument("--out", default="runs/latest")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saccader", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train a model; writes checkpoint, metrics and resolved config")
    _common(p)
    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ablate", help="fixation-count grid (N_train x N_test)")
    _common(p)
    p.add_argument("--grid", default="2,4", help="comma list used for both axes")
    p.add_argument("--seeds", default="0,1,2")
    p = sub.add_parser("bench", help="inference walltime per fixation count")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-list", dest="n_list", default="1,2,4,8,16")
    p.add_argument("--batches", type=int, default=32)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    p = sub.add_parser("visualize", help="render S, refined S, progression frames and a fixation overlay")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P5/P6 source image")
    return ap


def _int_list(text: str, name: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name} must be a comma list of integers") from None


def resolve_config(args, base: dict | None = None) -> config_mod.RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    values = dict(base or {})
    if args.config:
        values.update(config_mod.parse(Path(args.config).read_text()))
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.disable_position_bias:
        values["disable_position_bias"] = True
    return config_mod.from_dict(values)


def load_data(cfg: config_mod.RunConfig) -> dict[str, Dataset]:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        out = {}
        for split in ("train", "test", "val"):
            if (root / split).is_dir():
                out[split], _ = load_image_folder(root / split, canvas=cfg.canvas)
        if "train" not in out or "test" not in out:
            raise FileNotFoundError(f"{root} needs train/ and test/ class folders")
        return out
    return generate_glyph_dataset(cfg.dataset_config())


def _model_from_checkpoint(path: str, args) -> tuple[SaccadicModel, config_mod.RunConfig]:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    cfg = resolve_config(args, ckpt.meta.get("config", {}))
    model = build_model(cfg.model_config(), cfg.seed)
    restore(model, ckpt)
    model.eval()
    return model, cfg


def _append_jsonl(path: Path, record: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    if args.config is None:
        raise UsageError("train needs --config")
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_NAME)
    data = load_data(cfg)
    model = build_model(cfg.model_config(), cfg.seed)
    hist = train(model, data, cfg.train_config(), metrics_path=out / METRICS_NAME,
                 log=lambda s: print(s, file=sys.stderr))
    save_checkpoint(model, out / CHECKPOINT_NAME, config=cfg.to_dict(), step=len(hist.rows))
    print(f"trained {len(hist.rows)} epochs; checkpoint {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    if args.mode not in EVAL_MODES:
        raise UsageError(f"--mode must be one of {', '.join(EVAL_MODES)}")
    model, cfg = _model_from_checkpoint(args.checkpoint, args)
    data = load_data(cfg)
    res = evaluate(model, data["test"], cfg.n_test, args.mode, cfg.sampler_params(), seed=cfg.seed)
    print(f"top1 {res.accuracy:.4f} mode={res.mode} n_test={res.n_test}")
    _append_jsonl(Path(args.out) / RESULTS_NAME, {
        "command": "eval", "mode": res.mode, "n_test": res.n_test, "top1": res.accuracy,
        "per_class": {str(k): v for k, v in res.per_class.items()}, "seed": cfg.seed,
        "checkpoint": str(args.checkpoint),
    })
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    grid = _int_list(args.grid, "grid")
    seeds = _int_list(args.seeds, "seeds")
    if any(n < 2 for n in grid):
        raise UsageError("grid values must be >= 2")
    data = load_data(cfg)
    mcfg = cfg.model_config()
    matrix = fixation_grid_ablation(lambda s: build_model(mcfg, s), data, cfg.train_config(), grid, grid, seeds)
    print(format_matrix(matrix, grid, grid), end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_NAME)
    _append_jsonl(out / RESULTS_NAME, {
        "command": "ablate", "n_train": grid, "n_test": grid, "seeds": seeds,
        "matrix": [[float(v) for v in row] for row in matrix],
    })
    return 0


def cmd_bench(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint, args)
    n_list = _int_list(args.n_list, "n-list")
    if not n_list or args.batches < 1:
        raise UsageError("need at least one N and one batch")
    data = load_data(cfg)
    rows = runtime_bench(model, data["test"], n_list, args.batches, args.batch_size, cfg.sampler_params())
    print(f"{'N':>4} {'mean_s':>10} {'ci95_s':>10} {'batches':>8}")
    for r in rows:
        print(f"{r.n:>4d} {r.mean:>10.5f} {r.ci95:>10.5f} {r.samples:>8d}")
        _append_jsonl(Path(args.out) / RESULTS_NAME, {
            "command": "bench", "n": r.n, "mean_s": r.mean, "ci95_s": r.ci95, "batches": r.samples,
        })
    return 0


def to_grey(field: np.ndarray) -> np.ndarray:
    """Scale a nonnegative map to uint8 with its maximum at 255."""
    f = np.asarray(field, dtype=np.float64)
    top = f.max()
    if not top > 0:
        return np.zeros(f.shape, dtype=np.uint8)
    return np.round(f / top * 255.0).astype(np.uint8)


def _outline(img: np.ndarray, center, window, colour=(255, 0, 0)) -> None:
    h, w = img.shape[1:]
    r0 = int(round(center[0] - window[0] / 2))
    c0 = int(round(center[1] - window[1] / 2))
    r1, c1 = min(h, r0 + window[0]) - 1, min(w, c0 + window[1]) - 1
    r0, c0 = max(0, r0), max(0, c0)
    col = np.asarray(colour, dtype=np.uint8)[:, None]
    img[:, r0, c0 : c1 + 1] = col
    img[:, r1, c0 : c1 + 1] = col
    img[:, r0 : r1 + 1, c0] = col
    img[:, r0 : r1 + 1, c1] = col


def cmd_visualize(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint, args)
    try:
        src = read_pnm(args.image)
    except (OSError, ValueError) as e:
        raise RuntimeError(f"cannot read image {args.image}: {e}") from None
    side = cfg.canvas
    if src.shape[1:] != (side, side):
        raise RuntimeError(f"image must be {side}x{side}, got {src.shape[2]}x{src.shape[1]}")
    x = torch.from_numpy(src.astype(np.float32) / 255.0)[None]
    with torch.no_grad():
        per = model(x, n=0, sampler="none").peripheral
    mcfg = model.config
    raw = per.priority[0].double().numpy()
    refined = refine_priority(raw, mcfg.source, mcfg.window)
    params = cfg.sampler_params().scaled_to(side)
    fx = sample_fixations(refined, params, window=mcfg.window, record=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "priority_raw.pgm", out / "priority_refined.pgm"]
    write_pnm(written[0], to_grey(raw))
    write_pnm(written[1], to_grey(refined))
    # frame k shows the map the (k+1)-th draw was taken from
    frames = render_priority_progression(fx.snapshots[: len(fx)])
    for k, f in enumerate(frames):
        written.append(out / f"progression_{k:02d}.pgm")
        write_pnm(written[-1], to_grey(f))
    overlay = src.copy()
    for p in fx.points:
        _outline(overlay, p, mcfg.window)
    written.append(out / "fixations.ppm")
    write_pnm(written[-1], overlay)
    for w in written:
        print(w)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "visualize": cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = os.environ.get("SACC_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"saccader: SACC_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](args)
    except (UsageError, config_mod.ConfigError) as e:
        print(f"saccader: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, RuntimeError, ValueError, OSError) as e:
        print(f"saccader: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
