"""Experiment runner: training loop with per-epoch evaluation, CSV/JSON logging,
checkpointing and resume, plus plot-data reshaping of metrics files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .attacks import preset
from .config import ExperimentConfig
from .data import Dataset, gen_synthetic_blobs, load_cifar10_binary, load_idx
from .metrics import (CSV_COLUMNS, DetectorThresholds, EpochMetrics, OverfitVerdict,
                      best_epoch, detect_catastrophic_overfitting, eval_accuracy)
from .models import MLP, ModelParams, SmallConvNet, init_params, load_model, save_model
from .trainers import (TrainingDiverged, TrainState, init_state, load_train_state,
                       save_train_state, train_epoch)

log = logging.getLogger(__name__)

PLOT_SERIES = {
    "acc_vs_epoch": ("clean_acc", "fgsm_acc", "pgd10_acc"),
    "delta_norm": ("delta_l2_mean",),
}


class MetricsFormatError(ValueError):
    pass


# ---------------------------------------------------------------- setup

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    dtype = T.get_dtype()
    if ds.kind == "blobs":
        train = gen_synthetic_blobs(ds.classes, ds.dim, ds.n_per_class, ds.spread, ds.seed, dtype)
        test = gen_synthetic_blobs(ds.classes, ds.dim, ds.n_test_per_class, ds.spread,
                                   ds.seed + 1000, dtype)
    elif ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels, ds.num_classes, dtype)
        test = load_idx(ds.test_images, ds.test_labels, ds.num_classes, dtype)
    else:
        train = load_cifar10_binary(ds.train_path, dtype)
        test = load_cifar10_binary(ds.test_path, dtype)
    return train.subset(ds.train_limit), test.subset(ds.test_limit)


def build_arch(cfg: ExperimentConfig, train: Dataset):
    m = cfg.model
    if m.arch == "cnn":
        return SmallConvNet(train.input_shape, tuple(m.channels), m.fc_width, train.num_classes)
    return MLP(train.input_shape, tuple(m.hidden), train.num_classes)


def evaluate(model: ModelParams, test: Dataset, cfg: ExperimentConfig,
             metrics: EpochMetrics) -> EpochMetrics:
    bs = cfg.eval.batch_size
    metrics.clean_acc = eval_accuracy(model, test, None, bs)
    for name in cfg.eval.attacks:
        acc = eval_accuracy(model, test, preset(name, cfg.eval_epsilon, cfg.eval.seed), bs)
        setattr(metrics, f"{name}_acc", acc)
    return metrics


# ---------------------------------------------------------------- metrics files

def write_metrics_csv(path, history: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in history:
            w.writerow(m.csv_row())


def append_metrics_row(path, m: EpochMetrics) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(m.csv_row())


def read_metrics_csv(path) -> list[EpochMetrics]:
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise MetricsFormatError(f"{path}: header {reader.fieldnames} does not match "
                                 f"{list(CSV_COLUMNS)}")
    rows = []
    for lineno, row in enumerate(reader, 2):
        if None in row or any(v is None for v in row.values()):
            raise MetricsFormatError(f"{path}:{lineno}: wrong number of fields")
        try:
            rows.append(EpochMetrics.from_csv_row(row))
        except ValueError as exc:
            raise MetricsFormatError(f"{path}:{lineno}: {exc}") from None
    return rows


# ---------------------------------------------------------------- run

def detector_thresholds(cfg: ExperimentConfig) -> DetectorThresholds:
    """Detector settings; with a budget warm-up, start at the first full-budget epoch."""
    start = max(cfg.detector.start_epoch, cfg.train.epsilon_warmup)
    return dataclasses.replace(cfg.detector, start_epoch=start)


def _summary(history, status: str, cfg: ExperimentConfig, error: Optional[dict] = None) -> dict:
    verdict = (detect_catastrophic_overfitting(history, detector_thresholds(cfg))
               if history else OverfitVerdict(False))
    out = {
        "status": status,
        "best": best_epoch(history).to_dict() if history else None,
        "last": history[-1].to_dict() if history else None,
        "overfit": asdict(verdict),
        "config_echo": cfg.to_dict(),
    }
    if error:
        out["error"] = error
    return out


def run_experiment(cfg: ExperimentConfig, resume: Optional[str] = None) -> int:
    """Train, evaluate every epoch and write artifacts into ``cfg.run.out_dir``.

    Artifacts: ``metrics.csv`` (one row per epoch), ``last.fatb``,
    ``best.fatb`` (highest PGD-10 accuracy), ``ckpt_epochNNN.fatb`` every
    ``run.checkpoint_every`` epochs (resumable) and ``summary.json``.
    Returns 0 when every epoch completed with finite losses, 1 otherwise.
    """
    T.set_precision(cfg.run.precision)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    tcfg = cfg.train
    if resume:
        state, meta = load_train_state(resume)
        history = [EpochMetrics.from_dict(d) for d in meta.get("history", [])]
        if len(history) != state.epoch:
            raise ValueError(f"{resume}: history has {len(history)} rows for epoch {state.epoch}")
    else:
        seed = cfg.model.init_seed if cfg.model.init_seed is not None else tcfg.seed
        model = init_params(build_arch(cfg, train), seed)
        state = init_state(model, tcfg, train)
        history = []
    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_path, history)
    best = best_epoch(history) if history else None

    while state.epoch < tcfg.epochs:
        t0 = time.perf_counter()
        try:
            state, m = train_epoch(state, train, tcfg)
        except TrainingDiverged as exc:
            log.error("training diverged: %s", exc)
            summary = _summary(history, "diverged", cfg,
                               {"epoch": exc.epoch, "batch": exc.batch, "message": exc.detail})
            (out / "summary.json").write_text(json.dumps(summary, indent=2))
            return 1
        evaluate(state.model, test, cfg, m)
        m.wall_time_s = time.perf_counter() - t0
        history.append(m)
        append_metrics_row(metrics_path, m)
        log.info("epoch %d: clean %.3f fgsm %s pgd10 %s loss %.4f", m.epoch, m.clean_acc,
                 m.fgsm_acc, m.pgd10_acc, m.train_loss)
        meta = {"metrics": m.to_dict()}
        save_model(state.model, out / "last.fatb", meta=meta)
        if best is None or (m.pgd10_acc is not None and best.pgd10_acc is not None
                            and m.pgd10_acc > best.pgd10_acc):
            best = m
            save_model(state.model, out / "best.fatb", meta=meta)
        k = cfg.run.checkpoint_every
        if k and state.epoch % k == 0:
            save_train_state(out / f"ckpt_epoch{state.epoch:03d}.fatb", state,
                             meta={"history": [h.to_dict() for h in history],
                                   "config": cfg.to_dict()})
    (out / "summary.json").write_text(json.dumps(_summary(history, "completed", cfg), indent=2))
    return 0


def evaluate_checkpoint(path, cfg: ExperimentConfig, attacks=("fgsm", "pgd10")) -> dict:
    model, _, _ = load_model(path)
    T.set_precision(8 * next(iter(model.params.values())).dtype.itemsize)
    _, test = load_datasets(cfg)
    result = {"clean": eval_accuracy(model, test, None, cfg.eval.batch_size)}
    for name in attacks:
        result[name] = eval_accuracy(model, test, preset(name, cfg.eval_epsilon, cfg.eval.seed),
                                     cfg.eval.batch_size)
    return result


# ---------------------------------------------------------------- plot data

def to_tidy(history: list[EpochMetrics], kind: str) -> list[tuple[int, str, float]]:
    if kind not in PLOT_SERIES:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {sorted(PLOT_SERIES)}")
    rows = []
    for m in history:
        for series in PLOT_SERIES[kind]:
            v = getattr(m, series)
            if v is not None:
                rows.append((m.epoch, series, v))
    return rows


def from_tidy(rows: list[tuple[int, str, float]]) -> dict[int, dict[str, float]]:
    """Inverse reshape: epoch -> {series: value}."""
    wide: dict[int, dict[str, float]] = {}
    for epoch, series, value in rows:
        wide.setdefault(epoch, {})[series] = value
    return wide


def emit_plot_data(metrics_csv, kind: str, out_path) -> int:
    """Write ``epoch,series,value`` rows for ``kind``; returns the number of data rows."""
    rows = to_tidy(read_metrics_csv(metrics_csv), kind)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "series", "value"))
        for epoch, series, value in rows:
            w.writerow((epoch, series, repr(float(value))))
    return len(rows)


def read_plot_data(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch", "series", "value"]:
            raise MetricsFormatError(f"{path}: unexpected header {header}")
        return [(int(e), s, float(v)) for e, s, v in reader]


def run_state_equal(a: TrainState, b: TrainState) -> bool:
    """Bitwise comparison of two training states (model, velocity, store)."""
    if not a.model.equals(b.model) or a.epoch != b.epoch or a.step != b.step:
        return False
    if any(not np.array_equal(a.velocity[k], b.velocity[k]) for k in a.velocity):
        return False
    if (a.store is None) != (b.store is None):
        return False
    if a.store is not None:
        return (np.array_equal(a.store.present, b.store.present)
                and all(np.array_equal(a.store.arrays[s], b.store.arrays[s])
                        for s in a.store.slots))
    return True
