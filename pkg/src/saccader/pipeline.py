"""Training, evaluation, the fixation-grid ablation and the runtime bench."""
from __future__ import annotations

import copy
import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import Dataset
from .fusion import LossConfig, nll, total_loss
from .model import SaccadicModel
from .saccade import SamplerParams, refine_priority, sample_fixations_batch

EVAL_MODES = ("saccadic", "peripheral", "random")
METRIC_COLUMNS = ("epoch", "loss_per", "loss_fix", "alpha_mean", "top1")
# epoch slot used for evaluation-time sampler seeds
EVAL_STREAM = 2**31 - 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.02
    warmup_epochs: int = 2
    weight_decay: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "sgd"  # or "adamw"
    label_smoothing: float = 0.1
    n_train: int = 4
    n_test: int = 4
    sampler: SamplerParams = field(default_factory=SamplerParams)
    loss: LossConfig = field(default_factory=LossConfig)
    # "saccadic" trains on sampled fixations; "random" on uniform positions with flat beta
    train_mode: str = "saccadic"
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("rates must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must lie in [0, 1)")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("fixation counts must be non-negative")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.train_mode not in ("saccadic", "random"):
            raise ValueError(f"unknown train mode {self.train_mode!r}")


def sample_seed(seed: int, epoch: int, index: int) -> int:
    """Per-sample sampler seed; independent of batching and worker layout."""
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    warm = cfg.warmup_epochs * steps_per_epoch
    total = max(1, cfg.epochs * steps_per_epoch)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    t = (step - warm) / max(1, total - warm)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(1.0, t)))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train_step(model: SaccadicModel, x, y, cfg: TrainConfig, seeds: Sequence[int]):
    """Loss for one batch and its pieces; the caller runs backward."""
    y = torch.as_tensor(y)
    n = cfg.n_train
    if n == 0 or cfg.loss.lambda_fix == 0:
        out = model(x, n=0, sampler="none")
        loss = cfg.loss.lambda_per * nll(out.z_per, y, cfg.label_smoothing)
        return loss, out, float("nan")
    random = cfg.train_mode == "random"
    out = model(x, n=n, sampler="random" if random else "saccadic", params=cfg.sampler,
                seeds=seeds, uniform_beta=random)
    loss = total_loss(out.z_per, out.z_fix, y, out.alpha, cfg.loss, cfg.label_smoothing)
    loss_fix = (loss - cfg.loss.lambda_per * nll(out.z_per, y, cfg.label_smoothing)).item() / max(cfg.loss.lambda_fix, 1e-12)
    return loss, out, loss_fix


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def write_metrics(rows: Sequence[dict], path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _append_metrics(row: dict, path: Path):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def train(
    model: SaccadicModel,
    data: dict[str, Dataset],
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> History:
    """Two-pass training with warm-up/cosine decay and optional early stopping.

    Early stopping watches ``data["val"]`` when present (peripheral accuracy
    for fixation-free runs, the fused accuracy otherwise) and restores the
    best weights.
    """
    train_set = data["train"]
    val_set = data.get("val")
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    hist = History()
    metrics_path = Path(metrics_path) if metrics_path else None
    if metrics_path and metrics_path.exists():
        metrics_path.unlink()
    best_acc, best_state, stale = -1.0, None, 0
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        sums = {"loss_per": 0.0, "loss_fix": 0.0, "alpha": 0.0, "correct": 0, "count": 0}
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = train_set.batch(idx)
            x, y = torch.from_numpy(xb), torch.from_numpy(yb)
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, steps_per_epoch, cfg)
            seeds = [sample_seed(cfg.seed, epoch, int(i)) for i in idx]
            loss, out, loss_fix = train_step(model, x, y, cfg, seeds)
            loss_per = nll(out.z_per.detach(), y, cfg.label_smoothing).item()
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: per={loss_per} fix={loss_fix} "
                    f"alpha_mean={out.alpha.mean().item()}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            b = len(idx)
            sums["loss_per"] += loss_per * b
            sums["loss_fix"] += (0.0 if math.isnan(loss_fix) else loss_fix) * b
            sums["alpha"] += out.alpha.detach().sum().item()
            sums["correct"] += int((out.z.detach().argmax(-1) == y).sum())
            sums["count"] += b
        c = sums["count"]
        row = {
            "epoch": epoch,
            "loss_per": sums["loss_per"] / c,
            "loss_fix": sums["loss_fix"] / c,
            "alpha_mean": sums["alpha"] / c,
            "top1": sums["correct"] / c,
        }
        if val_set is not None:
            mode = "peripheral" if cfg.n_train == 0 or cfg.loss.lambda_fix == 0 else (
                "random" if cfg.train_mode == "random" else "saccadic")
            row["val_top1"] = evaluate(model, val_set, cfg.n_test, mode, cfg.sampler, seed=cfg.seed).accuracy
        hist.rows.append(row)
        if metrics_path:
            _append_metrics(row, metrics_path)
        if log:
            log(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
        if val_set is not None:
            if row["val_top1"] > best_acc:
                best_acc, stale, hist.best_epoch = row["val_top1"], 0, epoch
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= cfg.patience:
                    hist.stopped_early = True
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    return hist


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    predictions: np.ndarray
    mode: str
    n_test: int


@torch.no_grad()
def predict(model: SaccadicModel, x: torch.Tensor, n_test: int, mode: str, params: SamplerParams | None = None,
            seeds: Sequence[int] | None = None, points=None, fixed_alpha=None) -> torch.Tensor:
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    if mode == "peripheral" or (n_test == 0 and points is None):
        return model(x, n=0, sampler="none").z_per
    return model(x, n=n_test, sampler=mode, params=params, seeds=seeds, points=points,
                 uniform_beta=mode == "random", fixed_alpha=fixed_alpha).z


def evaluate(
    model: SaccadicModel,
    data: Dataset,
    n_test: int = 4,
    mode: str = "saccadic",
    params: SamplerParams | None = None,
    seed: int = 0,
    batch_size: int = 50,
) -> EvalResult:
    """Top-1 accuracy and per-class recall.

    ``random`` swaps the sampler for uniform valid positions and beta for
    flat weights; ``peripheral`` ignores fixations.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}")
    was_training = model.training
    model.eval()
    preds = np.zeros(len(data), dtype=np.int64)
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            xb, _ = data.batch(idx)
            seeds = [sample_seed(seed, EVAL_STREAM, int(i)) for i in idx]
            z = predict(model, torch.from_numpy(xb), n_test, mode, params, seeds)
            preds[idx] = z.argmax(-1).numpy()
    finally:
        model.train(was_training)
    labels = data.labels
    per_class = {int(k): float((preds[labels == k] == k).mean()) for k in np.unique(labels)}
    return EvalResult(float((preds == labels).mean()), per_class, preds, mode, 0 if mode == "peripheral" else n_test)


def fixation_grid_ablation(
    model_factory: Callable[[int], SaccadicModel],
    data: dict[str, Dataset],
    cfg: TrainConfig,
    n_train_grid: Sequence[int] = (2, 4),
    n_test_grid: Sequence[int] = (2, 4),
    seeds: Sequence[int] = (0, 1, 2),
) -> np.ndarray:
    """Mean accuracy matrix, rows = N_train, columns = N_test."""
    if any(n < 2 for n in n_train_grid):
        raise ValueError("training needs at least two fixations")
    acc = np.zeros((len(n_train_grid), len(n_test_grid), len(seeds)))
    for i, nt in enumerate(n_train_grid):
        for s, seed in enumerate(seeds):
            model = model_factory(seed)
            train(model, data, replace(cfg, n_train=nt, seed=seed))
            for j, ne in enumerate(n_test_grid):
                acc[i, j, s] = evaluate(model, data["test"], ne, "saccadic", cfg.sampler, seed=seed).accuracy
    return acc.mean(axis=-1)


# variant -> evaluation mode
VARIANTS = {"vanilla": "peripheral", "random": "random", "saccader": "saccadic"}


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Vanilla trains the peripheral branch alone; random trains on uniform fixations with flat beta."""
    if variant == "vanilla":
        return replace(cfg, n_train=0, loss=replace(cfg.loss, lambda_fix=0.0))
    if variant == "random":
        return replace(cfg, train_mode="random")
    if variant == "saccader":
        return replace(cfg, train_mode="saccadic")
    raise ValueError(f"unknown variant {variant!r}")


def compare_variants(
    model_factory: Callable[[int], SaccadicModel],
    data: dict[str, Dataset],
    cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    variants: Sequence[str] = tuple(VARIANTS),
    log: Callable[[str], None] | None = None,
) -> dict[str, list[float]]:
    """Test top-1 per seed for each variant, each scored in its own evaluation mode."""
    out: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            t0 = time.perf_counter()
            model = model_factory(seed)
            train(model, data, replace(variant_config(cfg, v), seed=seed))
            acc = evaluate(model, data["test"], cfg.n_test, VARIANTS[v], cfg.sampler, seed=seed).accuracy
            out[v].append(acc)
            if log:
                log(f"seed={seed} variant={v} top1={acc:.4f} seconds={time.perf_counter() - t0:.1f}")
    return out


def format_matrix(matrix: np.ndarray, rows: Sequence[int], cols: Sequence[int]) -> str:
    buf = io.StringIO()
    buf.write("N_train\\N_test " + " ".join(f"{c:>7d}" for c in cols) + "\n")
    for r, line in zip(rows, matrix):
        buf.write(f"{r:>14d} " + " ".join(f"{v:7.3f}" for v in line) + "\n")
    return buf.getvalue()


@dataclass
class BenchRow:
    n: int
    mean: float
    ci95: float
    samples: int


def _summarise(n: int, times: Sequence[float]) -> BenchRow:
    t = np.asarray(times)
    ci = 1.96 * t.std(ddof=1) / math.sqrt(len(t)) if len(t) > 1 else 0.0
    return BenchRow(n, float(t.mean()), float(ci), len(t))


@torch.no_grad()
def runtime_bench(
    model: SaccadicModel,
    data: Dataset,
    n_list: Sequence[int] = (1, 2, 4, 8, 16),
    batches: int = 32,
    batch_size: int = 8,
    params: SamplerParams | None = None,
    warmup: int = 2,
) -> list[BenchRow]:
    """Full-inference walltime per batch for each N (N=0 is the peripheral pass)."""
    if batches < 1:
        raise ValueError("need at least one batch")
    model.eval()
    rows = []
    for n in n_list:
        times = []
        for b in range(warmup + batches):
            idx = np.arange(b * batch_size, (b + 1) * batch_size) % len(data)
            x = torch.from_numpy(data.batch(idx)[0])
            t0 = time.perf_counter()
            predict(model, x, n, "peripheral" if n == 0 else "saccadic", params, seeds=list(idx))
            if b >= warmup:
                times.append(time.perf_counter() - t0)
        rows.append(_summarise(n, times))
    return rows


def sampler_bench(
    pooled: np.ndarray,
    window: tuple[int, int],
    n_list: Sequence[int] = (1, 2, 4, 8, 16),
    repeats: int = 32,
    params: SamplerParams | None = None,
    backend: str | None = None,
) -> list[BenchRow]:
    """Sampler-only walltime (draw + suppress) on fixed pooled maps."""
    params = params or SamplerParams()
    rows = []
    for n in n_list:
        p = replace(params, n=n)
        seeds = list(range(len(pooled)))
        sample_fixations_batch(pooled, p, window, seeds, backend=backend)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            sample_fixations_batch(pooled, p, window, seeds, backend=backend)
            times.append(time.perf_counter() - t0)
        rows.append(_summarise(n, times))
    return rows


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a + b x``; returns ``(a, b, R^2)``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(a), float(b), float(1.0 - (resid**2).sum() / ss_tot) if ss_tot > 0 else 1.0


def pooled_maps(model: SaccadicModel, x: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        per = model(x, n=0, sampler="none").peripheral
    return refine_priority(per.priority, model.config.source, model.config.window)
