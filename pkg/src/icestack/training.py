"""Training loop, Adam with L2 weight decay, step LR schedule, RMSE evaluation and multi-trial benchmarking."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import GraphSample, LayerSequence, Normalizer, fit_normalizer, make_sample, split
from .models import ARCHITECTURES, Model, ModelCheckpoint, ModelConfig, build_model

log = logging.getLogger(__name__)

REPORT_SCHEMA = "icestack-report/v1"
TABLE_SCHEMA = "icestack-table/v1"
TABLE_COLUMNS = ("model", "rmse_mean", "rmse_std", "train_time_s")
DISPLAY_NAMES = {"gcn-lstm": "GCN-LSTM", "sage-lstm": "GraphSAGE-LSTM", "multibranch": "Multi-branch(SAGE+TempConv)"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    weight_decay: float = 1e-4
    lr_step: int = 75
    lr_factor: float = 0.5
    epochs: int = 150
    seed: int = 0
    trials: int = 5
    parallel_trials: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr0 <= 0 or self.lr_step < 1 or not (0 < self.lr_factor <= 1):
            raise ValueError("learning-rate schedule values must be positive")
        if self.weight_decay < 0 or self.trials < 1:
            raise ValueError("weight_decay must be >= 0 and trials >= 1")


def derive_seeds(seed: int) -> dict[str, int]:
    """Expand one user seed into independent integer seeds for each random stream."""
    state = np.random.SeedSequence(seed).generate_state(4, dtype=np.uint32)
    return dict(zip(("data", "split", "init", "shuffle"), (int(s) for s in state)))


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_factor ** (epoch // config.lr_step)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update; weight decay is added to the gradient as an L2 term."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"Adam buffer for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    d = ad.sub(pred, target)
    return ad.scale(ad.sum_all(ad.hadamard(d, d)), 1.0 / d.data.size)


def pooled_rmse(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    sq = sum(float(np.sum((p - t) ** 2)) for p, t in zip(preds, targets))
    count = sum(t.size for t in targets)
    return math.sqrt(sq / count)


def _denorm_targets(arr: np.ndarray, normalizer: Normalizer | None, n_in: int) -> np.ndarray:
    if normalizer is None:
        return arr
    layers = slice(n_in, n_in + arr.shape[1])
    return normalizer.invert_thickness(arr, layers, axis=1)


def rmse(model: Model, samples: Sequence[GraphSample], normalizer: Normalizer | None) -> float:
    """RMSE in original thickness units, pooled over samples x nodes x output layers."""
    if not samples:
        return float("nan")
    n_in = model.config.n_in
    preds = [_denorm_targets(model.predict(s), normalizer, n_in) for s in samples]
    truth = [_denorm_targets(s.targets, normalizer, n_in) for s in samples]
    return pooled_rmse(preds, truth)


def mean_baseline_rmse(train: Sequence[GraphSample], test: Sequence[GraphSample],
                       normalizer: Normalizer | None, n_in: int) -> float:
    """RMSE of predicting each output layer's training-set mean thickness."""
    tr = np.concatenate([_denorm_targets(s.targets, normalizer, n_in) for s in train], axis=0)
    mu = tr.mean(axis=0)
    truth = [_denorm_targets(s.targets, normalizer, n_in) for s in test]
    return pooled_rmse([np.broadcast_to(mu, t.shape) for t in truth], truth)


def mean_loss(model: Model, samples: Sequence[GraphSample]) -> float:
    if not samples:
        return float("nan")
    return float(np.mean([np.mean((model.predict(s) - s.targets) ** 2) for s in samples]))


@dataclass
class TrainReport:
    arch: str
    train_config: dict
    model_config: dict
    history: list = field(default_factory=list)  # one dict per epoch
    epoch_seconds: list = field(default_factory=list)
    total_seconds: float = 0.0
    test_rmse_final: float = float("nan")
    test_rmse_best_val: float = float("nan")
    best_val_epoch: int | None = None
    baseline_rmse: float = float("nan")
    n_parameters: int = 0

    TIMING_KEYS = ("timing",)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "arch": self.arch,
            "train_config": self.train_config,
            "model_config": self.model_config,
            "n_parameters": self.n_parameters,
            "history": self.history,
            "test_rmse_final": self.test_rmse_final,
            "test_rmse_best_val": self.test_rmse_best_val,
            "best_val_epoch": self.best_val_epoch,
            "baseline_rmse": self.baseline_rmse,
            "timing": {"total_seconds": self.total_seconds, "epoch_seconds": self.epoch_seconds},
        }

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0


@dataclass
class Splits:
    train: list
    val: list
    test: list


def prepare_splits(records: Sequence[LayerSequence], split_seed: int, model_config: ModelConfig,
                   normalizer: Normalizer | None = None) -> tuple[Splits, Normalizer]:
    """Split records 3:1:1, fit the normalizer on train, and build samples."""
    spec = split(records, split_seed)
    train_recs = [records[i] for i in spec.train]
    norm = normalizer or fit_normalizer(train_recs)

    def build(idx):
        return [make_sample(records[i], norm, n_in=model_config.n_in, n_out=model_config.n_out,
                            edge_formula=model_config.edge_formula) for i in idx]

    return Splits(build(spec.train), build(spec.val), build(spec.test)), norm


def train(model: Model, splits: Splits, config: TrainConfig, normalizer: Normalizer | None = None,
          shuffle_seed: int | None = None, init_seed: int | None = None) -> tuple[TrainReport, ModelCheckpoint]:
    """Per-sample Adam training; records losses and wall-clock per epoch."""
    params = model.parameters()
    rng = np.random.default_rng(derive_seeds(config.seed)["shuffle"] if shuffle_seed is None else shuffle_seed)
    state = AdamState()
    report = TrainReport(
        arch=model.config.arch,
        train_config=asdict(config),
        model_config=asdict(model.config),
        n_parameters=model.n_parameters(),
    )
    best_val = math.inf
    best_params = None
    n_train = len(splits.train)
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        t0 = time.perf_counter()
        losses = []
        for k in rng.permutation(n_train):
            sample = splits.train[k]
            try:
                with np.errstate(over="ignore", invalid="ignore"), Tape() as tape:
                    loss = mse_loss(model.forward(sample), sample.targets)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{model.config.arch}: {exc} at epoch {epoch}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"{model.config.arch}: non-finite train loss at epoch {epoch}")
            model.zero_grad()
            tape.backward(loss)
            adam_step(params, {n: p.grad for n, p in params.items()}, state, lr, config.weight_decay)
            if not all(np.isfinite(p.data).all() for p in params.values()):
                raise TrainingDiverged(f"{model.config.arch}: non-finite parameters at epoch {epoch}")
            losses.append(value)
        val = mean_loss(model, splits.val)
        report.epoch_seconds.append(time.perf_counter() - t0)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if not math.isfinite(train_loss):
            raise TrainingDiverged(f"{model.config.arch}: non-finite train loss at epoch {epoch}")
        report.history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val})
        if splits.val and val < best_val:
            best_val = val
            best_params = {n: p.data.copy() for n, p in params.items()}
            report.best_val_epoch = epoch
        log.debug("%s epoch %d lr %.5f train %.6f val %.6f", model.config.arch, epoch, lr, train_loss, val)
    model.zero_grad()
    report.total_seconds = float(sum(report.epoch_seconds))
    report.test_rmse_final = rmse(model, splits.test, normalizer)
    if best_params is None:
        report.test_rmse_best_val = report.test_rmse_final
    else:
        best = copy.deepcopy(model)
        for n, p in best.parameters().items():
            p.data[...] = best_params[n]
        report.test_rmse_best_val = rmse(best, splits.test, normalizer)
    if splits.train and splits.test:
        report.baseline_rmse = mean_baseline_rmse(splits.train, splits.test, normalizer, model.config.n_in)
    seed = config.seed if init_seed is None else init_seed
    ckpt = ModelCheckpoint(model=model, normalizer=normalizer, seed=seed,
                           extra={"best_val_epoch": report.best_val_epoch})
    return report, ckpt


@dataclass
class TrialSummary:
    arch: str
    rmse_mean: float
    rmse_std: float
    train_time_mean: float
    rmses: list
    train_times: list
    failed: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def row(self) -> dict:
        return {
            "model": DISPLAY_NAMES.get(self.arch, self.arch),
            "rmse_mean": self.rmse_mean,
            "rmse_std": self.rmse_std,
            "train_time_s": self.train_time_mean,
        }


def run_trial(arch: str, splits: Splits, normalizer: Normalizer, config: TrainConfig,
              model_config: ModelConfig, trial_seed: int) -> TrainReport:
    seeds = derive_seeds(trial_seed)
    mc = ModelConfig(**{**asdict(model_config), "arch": arch})
    model = build_model(mc, seeds["init"])
    cfg = TrainConfig(**{**asdict(config), "seed": trial_seed})
    report, _ = train(model, splits, cfg, normalizer, shuffle_seed=seeds["shuffle"], init_seed=seeds["init"])
    return report


def _run_trial_safe(args):
    try:
        return run_trial(*args)
    except TrainingDiverged as exc:
        return exc


def run_trials(arch: str, records: Sequence[LayerSequence], config: TrainConfig,
               model_config: ModelConfig | None = None) -> TrialSummary:
    """Train ``config.trials`` models with seeds seed..seed+trials-1 on one fixed split.

    A diverged trial is listed in ``failed`` and makes the summary statistics NaN.
    """
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    model_config = ModelConfig(**{**asdict(model_config or ModelConfig()), "arch": arch})
    splits, norm = prepare_splits(records, derive_seeds(config.seed)["split"], model_config)
    jobs = [(arch, splits, norm, config, model_config, config.seed + t) for t in range(config.trials)]
    if config.parallel_trials and config.trials > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(_run_trial_safe, jobs))
    else:
        results = [_run_trial_safe(j) for j in jobs]
    reports = [r for r in results if isinstance(r, TrainReport)]
    failed = [j[-1] for j, r in zip(jobs, results) if not isinstance(r, TrainReport)]
    rmses = [r.test_rmse_final for r in reports]
    times = [r.total_seconds for r in reports]
    if failed or not reports:
        mean = std = float("nan")
    else:
        mean, std = float(np.mean(rmses)), float(np.std(rmses))
    return TrialSummary(
        arch=arch,
        rmse_mean=mean,
        rmse_std=std,
        train_time_mean=float(np.mean(times)) if times else float("nan"),
        rmses=rmses,
        train_times=times,
        failed=failed,
        reports=reports,
    )


def format_duration(seconds: float) -> str:
    if not math.isfinite(seconds):
        return "n/a"
    s = int(round(seconds))
    return f"{s // 3600}:{s % 3600 // 60:02d}:{s % 60:02d}"


def table_text(summaries: Sequence[TrialSummary]) -> str:
    rows = [("Model", "RMSE Results", "Average Train Time")]
    for s in summaries:
        rows.append((DISPLAY_NAMES.get(s.arch, s.arch), f"{s.rmse_mean:.4f} ± {s.rmse_std:.4f}",
                     format_duration(s.train_time_mean)))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def table_csv(summaries: Sequence[TrialSummary]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={TABLE_SCHEMA}\n")
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for s in summaries:
        row = s.row()
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
