"""L-infinity attacks: FGSM, PGD, random starts, projection and pixel clamping.

Inputs and outputs are plain numpy arrays in the run's precision. Attacks only
read the model; its parameter arrays are read-only.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .losses import ce_loss
from .models import ModelParams, forward_graph
from .tensor import GradRequest

LossFn = Callable[[T.Tensor, np.ndarray], T.Tensor]

# When true, every attack (and projected-mode trainer) re-checks the L-inf budget.
BUDGET_CHECKS = os.environ.get("FASTADV_CHECK_BUDGET", "") not in ("", "0")


class BudgetViolation(AssertionError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int
    random_start: bool = False
    clamp_pixels: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError(f"epsilon, alpha and steps must be non-negative: {self}")


# Evaluation presets; PGD uses step epsilon/4 (2/255 at epsilon = 8/255).
PRESETS = {
    "fgsm": dict(steps=1, alpha_ratio=1.0, random_start=False),
    "pgd10": dict(steps=10, alpha_ratio=0.25, random_start=True),
    "pgd20": dict(steps=20, alpha_ratio=0.25, random_start=True),
    "pgd50": dict(steps=50, alpha_ratio=0.25, random_start=True),
}


def preset(name: str, epsilon: float, seed: int = 0) -> AttackConfig:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown attack preset {name!r}; choose from {sorted(PRESETS)}") from None
    return AttackConfig(epsilon=epsilon, alpha=epsilon * p["alpha_ratio"], steps=p["steps"],
                        random_start=p["random_start"], seed=seed)


def random_init_uniform(shape, epsilon: float, rng: np.random.Generator,
                        dtype=None) -> np.ndarray:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    dtype = dtype or T.get_dtype()
    return rng.uniform(-epsilon, epsilon, size=shape).astype(dtype)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return np.clip(delta, -epsilon, epsilon).astype(delta.dtype, copy=False)


def clamp_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(x.dtype, copy=False)


def check_budget(x_adv: np.ndarray, x_ref: np.ndarray, epsilon: float) -> None:
    """Raise :class:`BudgetViolation` if ``|x_adv - x_ref|`` exceeds epsilon by more than 1 ulp."""
    diff = np.abs(x_adv.astype(np.float64) - x_ref.astype(np.float64))
    ulp = np.spacing(np.maximum(np.maximum(np.abs(x_adv), np.abs(x_ref)),
                                x_adv.dtype.type(epsilon)))
    bad = diff > epsilon + ulp
    if bad.any():
        raise BudgetViolation(f"L-inf budget {epsilon} exceeded by {(diff - epsilon).max():.3g} "
                              f"at {int(bad.sum())} elements")


def input_gradient(model: ModelParams, x: np.ndarray, y, loss: LossFn = ce_loss) -> np.ndarray:
    """Gradient of ``loss(f(x), y)`` with respect to the input batch (labels constant)."""
    logits, tape = forward_graph(model, x)
    value = loss(logits, y)
    _, g = T.backward(tape, 1.0, GradRequest(wrt_params=False, wrt_input=True), output=value)
    return g.data


def sign_gradient(model: ModelParams, x: np.ndarray, y, loss: LossFn = ce_loss) -> np.ndarray:
    """``sign(grad_x loss)``; a non-finite gradient raises naming the first bad example."""
    try:
        g = input_gradient(model, x, y, loss)
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"non-finite loss/gradient in attack: {exc}") from exc
    bad = ~np.isfinite(g.reshape(len(g), -1)).all(axis=1)
    if bad.any():
        raise T.NonFiniteError(f"non-finite input gradient for batch index {int(np.argmax(bad))}")
    return np.sign(g)


def fgsm_step(model: ModelParams, x_anchor: np.ndarray, y, epsilon: float,
              loss: LossFn = ce_loss) -> tuple[np.ndarray, np.ndarray]:
    """One signed-gradient step of size epsilon from ``x_anchor``.

    Returns ``(x_adv, g)`` with ``g = sign(grad_x loss)`` evaluated at the
    anchor. No projection or pixel clamping is applied here.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    g = sign_gradient(model, x_anchor, y, loss)
    x_adv = x_anchor + x_anchor.dtype.type(epsilon) * g
    if BUDGET_CHECKS:
        check_budget(x_adv, x_anchor, epsilon)
    return x_adv, g


def pgd_attack(model: ModelParams, x_clean: np.ndarray, y, cfg: AttackConfig,
               loss: LossFn = ce_loss, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Projected signed-gradient ascent inside the epsilon-ball around ``x_clean``.

    Each step: ``delta <- clip(delta + alpha * sign(grad), -eps, eps)``, then
    (if configured) the iterate is clamped to [0, 1]. ``rng`` defaults to one
    seeded from ``cfg.seed``.
    """
    dtype = x_clean.dtype
    eps = dtype.type(cfg.epsilon)
    alpha = dtype.type(cfg.alpha)
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        delta = random_init_uniform(x_clean.shape, cfg.epsilon, rng, dtype)
    else:
        delta = np.zeros_like(x_clean)
    x_adv = _compose(x_clean, delta, cfg)
    for _ in range(cfg.steps):
        g = sign_gradient(model, x_adv, y, loss)
        delta = project_linf((x_adv - x_clean) + alpha * g, eps)
        x_adv = _compose(x_clean, delta, cfg)
    if BUDGET_CHECKS:
        check_budget(x_adv, x_clean, cfg.epsilon)
    return x_adv


def _compose(x_clean, delta, cfg: AttackConfig) -> np.ndarray:
    x = x_clean + delta
    return clamp_pixels(x) if cfg.clamp_pixels else x
