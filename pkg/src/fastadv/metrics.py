"""Robust-accuracy evaluation, perturbation norms and catastrophic-overfitting detection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, pgd_attack
from .data import Dataset
from .models import ModelParams, forward_logits

CSV_COLUMNS = (
    "epoch", "clean_acc", "fgsm_acc", "pgd10_acc", "train_loss", "ce_component",
    "reg_component", "lambda_mean", "lambda_min", "lambda_max", "delta_l2_mean",
    "lr", "wall_time_s",
)


@dataclass
class EpochMetrics:
    epoch: int
    clean_acc: Optional[float] = None
    fgsm_acc: Optional[float] = None
    pgd10_acc: Optional[float] = None
    train_loss: float = 0.0
    ce_component: float = 0.0
    reg_component: float = 0.0
    lambda_mean: Optional[float] = None
    lambda_min: Optional[float] = None
    lambda_max: Optional[float] = None
    delta_l2_mean: float = 0.0
    lr: float = 0.0
    wall_time_s: float = 0.0
    pgd20_acc: Optional[float] = None
    pgd50_acc: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpochMetrics":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]

    @classmethod
    def from_csv_row(cls, row: dict) -> "EpochMetrics":
        values = {}
        for c in CSV_COLUMNS:
            text = row[c]
            if c == "epoch":
                values[c] = int(text)
            else:
                values[c] = None if text == "" else float(text)
        return cls(**values)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


@dataclass(frozen=True)
class OverfitVerdict:
    detected: bool
    epoch: Optional[int] = None
    reason: Optional[str] = None  # "collapse" or "spike"

    def __post_init__(self):
        if self.detected != (self.epoch is not None):
            raise ValueError("detected must hold exactly when an epoch is given")


@dataclass(frozen=True)
class DetectorThresholds:
    collapse_pgd: float = 0.05
    collapse_clean: float = 0.5
    spike_drop: float = 0.20
    start_epoch: int = 1  # first epoch (1-based) the detector looks at


def predict(model: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_logits(model, x[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def eval_accuracy(model: ModelParams, dataset: Dataset, attack: Optional[AttackConfig] = None,
                  batch_size: int = 256) -> float:
    """Fraction of correctly classified (optionally attacked) examples.

    Random starts use one generator per batch, seeded from ``(attack.seed, batch index)``.
    """
    if len(dataset) == 0:
        raise ValueError("eval_accuracy on an empty dataset")
    correct = 0
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        x = dataset.x[start:start + batch_size]
        y = dataset.y[start:start + batch_size]
        if attack is not None:
            rng = np.random.default_rng([attack.seed, b])
            x = pgd_attack(model, x, y, attack, rng=rng)
        correct += int((forward_logits(model, x).argmax(axis=1) == y).sum())
    return correct / len(dataset)


def perturbation_l2_norm(x_adv: np.ndarray, x_clean: np.ndarray) -> float:
    """Mean over the batch of per-example Euclidean norms of ``x_adv - x_clean``."""
    if x_adv.shape != x_clean.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x_clean.shape}")
    if len(x_adv) == 0:
        return 0.0
    d = (x_adv.astype(np.float64) - x_clean.astype(np.float64)).reshape(len(x_adv), -1)
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def detect_catastrophic_overfitting(history: Sequence[EpochMetrics],
                                    thresholds: DetectorThresholds = DetectorThresholds()
                                    ) -> OverfitVerdict:
    """Flag the first epoch showing a robustness collapse or a PGD/FGSM divergence spike.

    collapse: PGD-10 accuracy below ``collapse_pgd`` while clean accuracy is above
    ``collapse_clean``. spike: PGD-10 accuracy fell by more than ``spike_drop``
    since the previous epoch while FGSM accuracy rose. Collapse wins when both hold.
    Epochs before ``start_epoch`` (e.g. a budget warm-up) are ignored.
    """
    if not history:
        raise ValueError("empty metrics history")
    prev = None
    for m in history:
        if m.epoch < thresholds.start_epoch:
            continue
        if m.pgd10_acc is not None and m.clean_acc is not None:
            if m.pgd10_acc < thresholds.collapse_pgd and m.clean_acc > thresholds.collapse_clean:
                return OverfitVerdict(True, m.epoch, "collapse")
        if (prev is not None and None not in (m.pgd10_acc, prev.pgd10_acc,
                                              m.fgsm_acc, prev.fgsm_acc)):
            if prev.pgd10_acc - m.pgd10_acc > thresholds.spike_drop and m.fgsm_acc > prev.fgsm_acc:
                return OverfitVerdict(True, m.epoch, "spike")
        prev = m
    return OverfitVerdict(False)


def best_epoch(history: Sequence[EpochMetrics]) -> EpochMetrics:
    """Epoch with the highest PGD-10 accuracy (earliest on ties)."""
    scored = [m for m in history if m.pgd10_acc is not None and not math.isnan(m.pgd10_acc)]
    if not scored:
        return history[-1]
    return max(scored, key=lambda m: (m.pgd10_acc, -m.epoch))
