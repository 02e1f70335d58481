"""Adversarial-training outer loops: PGD-AT, FGSM-AT, FGSM-RS, FGSM-MEP and FGSM-PCO.

Each ``train_epoch_*`` function runs one pass over the training set, updates
the :class:`TrainState` in place and returns it with the epoch's training
statistics. Randomness is drawn from generators seeded by
``(seed, stream, epoch, batch)`` so runs and resumed runs are bitwise
reproducible.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attacks import (AttackConfig, check_budget, clamp_pixels, fgsm_step, pgd_attack,
                      project_linf, random_init_uniform, sign_gradient)
from . import attacks
from .data import Dataset, batch_iter
from .losses import ce_loss, pco_loss
from .metrics import EpochMetrics
from .models import ModelParams, confidence_true_class, forward_graph, load_model, save_model
from .tensor import GradRequest

METHODS = ("PGD_AT", "FGSM_AT", "FGSM_RS", "FGSM_MEP", "FGSM_PCO")
PROJECTION_MODES = ("projected", "faithful")
FUSION_MODES = ("pco", "amplified_clean", "plain_clean")
LR_KINDS = ("multistep", "cyclic")

# rng stream ids
_INIT_STREAM = 1
_ATTACK_STREAM = 2


class TrainingDiverged(T.NonFiniteError):
    """A non-finite loss or gradient, tagged with the 1-based epoch and 0-based batch."""

    def __init__(self, epoch: int, batch: Optional[int], message: str):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch
        self.detail = message


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class TrainConfig:
    method: str = "FGSM_PCO"
    epsilon: float = 8 / 255
    attack_alpha: Optional[float] = None  # None: epsilon for FGSM methods, epsilon/4 for PGD
    pgd_steps: int = 10
    gamma: float = 2.0
    beta: float = 10.0
    mu: float = 0.3
    lr_schedule: str = "multistep"
    lr_base: float = 0.1
    lr_milestones: tuple[int, ...] = (100, 105)
    lr_factor: float = 0.1
    lr_max: float = 0.2
    epochs: int = 110
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    projection_mode: str = "projected"
    fusion_mode: str = "pco"
    clamp_pixels: bool = True
    reg_space: str = "prob"
    lambda_override: Optional[float] = None
    mep_reset_every: int = 0
    epsilon_warmup: int = 0  # epochs over which the training budget ramps up to epsilon

    def validate(self) -> "TrainConfig":
        def need(ok: bool, name: str, msg: str):
            if not ok:
                raise ConfigError(name, msg)
        need(self.method in METHODS, "method",
             f"unknown method {self.method!r}; supported: {', '.join(METHODS)}")
        need(self.epsilon >= 0, "epsilon", "must be >= 0")
        need(self.attack_alpha is None or self.attack_alpha >= 0, "attack_alpha", "must be >= 0")
        need(self.pgd_steps >= 0, "pgd_steps", "must be >= 0")
        need(self.gamma >= 1, "gamma", f"must be >= 1, got {self.gamma}")
        need(self.beta >= 0, "beta", "must be >= 0")
        need(0 <= self.mu <= 1, "mu", "must lie in [0, 1]")
        need(self.lr_schedule in LR_KINDS, "lr_schedule", f"must be one of {LR_KINDS}")
        need(self.lr_base >= 0 and self.lr_max >= 0, "lr_base", "learning rates must be >= 0")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.projection_mode in PROJECTION_MODES, "projection_mode",
             f"must be one of {PROJECTION_MODES}")
        need(self.fusion_mode in FUSION_MODES, "fusion_mode", f"must be one of {FUSION_MODES}")
        need(self.reg_space in ("prob", "logits"), "reg_space", "must be 'prob' or 'logits'")
        need(self.lambda_override is None or 0 <= self.lambda_override <= 1,
             "lambda_override", "must lie in [0, 1]")
        need(self.mep_reset_every >= 0, "mep_reset_every", "must be >= 0")
        need(self.epsilon_warmup >= 0, "epsilon_warmup", "must be >= 0")
        return self

    @property
    def alpha(self) -> float:
        if self.attack_alpha is not None:
            return self.attack_alpha
        return self.epsilon / 4 if self.method == "PGD_AT" else self.epsilon

    def budget(self, epoch: int) -> tuple[float, float]:
        """Training ``(epsilon, alpha)`` for a 0-indexed epoch.

        With ``epsilon_warmup = W > 0`` both scale by ``min(1, (epoch + 1) / W)``.
        Evaluation always uses the full epsilon.
        """
        if self.epsilon_warmup and epoch + 1 < self.epsilon_warmup:
            f = (epoch + 1) / self.epsilon_warmup
            return self.epsilon * f, self.alpha * f
        return self.epsilon, self.alpha

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


# ---------------------------------------------------------------- learning rate

def lr_at(cfg: TrainConfig, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """Learning rate for a 0-indexed epoch and step.

    multistep: ``lr_base`` scaled by ``lr_factor`` at each milestone passed.
    cyclic: triangular 0 -> ``lr_max`` -> 0, linear over all training steps.
    """
    if cfg.lr_schedule == "multistep":
        drops = sum(1 for m in cfg.lr_milestones if epoch >= m)
        return cfg.lr_base * cfg.lr_factor ** drops
    total = cfg.epochs * steps_per_epoch
    t = epoch * steps_per_epoch + step_in_epoch
    return cfg.lr_max * max(0.0, 1.0 - abs(2.0 * t / total - 1.0))


# ---------------------------------------------------------------- state

class PerturbationStore:
    """Per-example adversarial state, keyed by dataset index.

    Holds one array per named slot (``x_prev`` for PCO, ``eta`` and
    ``momentum`` for MEP) plus a mask of which indices have been written.
    """

    def __init__(self, slots: tuple[str, ...], n: int, example_shape: tuple, dtype):
        self.arrays = {s: np.zeros((n, *example_shape), dtype=dtype) for s in slots}
        self.present = np.zeros(n, dtype=bool)

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(self.arrays)

    @property
    def tensors_per_example(self) -> int:
        return len(self.arrays)

    def has(self, idx) -> bool:
        return bool(self.present[idx].all())

    def get(self, slot: str, idx) -> np.ndarray:
        missing = np.asarray(idx)[~self.present[idx]]
        if missing.size:
            raise KeyError(f"perturbation store has no entry for example(s) "
                           f"{missing[:8].tolist()}")
        return self.arrays[slot][idx]

    def put(self, idx, **values: np.ndarray) -> None:
        if set(values) != set(self.arrays):
            raise KeyError(f"store expects slots {self.slots}, got {sorted(values)}")
        for slot, v in values.items():
            dest = self.arrays[slot]
            if v.shape != (len(idx), *dest.shape[1:]):
                raise T.ShapeError(f"store slot {slot!r}: got {v.shape}, "
                                   f"expected {(len(idx), *dest.shape[1:])}")
            dest[idx] = v
        self.present[idx] = True


@dataclass
class TrainState:
    model: ModelParams
    velocity: dict[str, np.ndarray]
    store: Optional[PerturbationStore] = None
    epoch: int = 0  # completed epochs
    step: int = 0   # completed optimizer steps
    cursor: int = field(default=-1, compare=False)  # batch in progress, for diagnostics


def init_state(model: ModelParams, cfg: TrainConfig, train: Dataset) -> TrainState:
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    slots = {"FGSM_PCO": ("x_prev",), "FGSM_MEP": ("eta", "momentum")}.get(cfg.method)
    store = None
    if slots:
        store = PerturbationStore(slots, len(train), train.input_shape, train.x.dtype)
    return TrainState(model=model, velocity=velocity, store=store)


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 5e-4) -> TrainState:
    """Heavy-ball SGD with coupled weight decay on every parameter (biases included).

    ``v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v``
    """
    bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise T.NonFiniteError(f"non-finite gradient for parameters {bad} "
                               f"at step {state.step}; update aborted")
    new_params, new_vel = {}, {}
    for name, theta in state.model.params.items():
        dt = theta.dtype.type
        v = dt(momentum) * state.velocity[name] + (grads[name] + dt(weight_decay) * theta)
        new_vel[name] = v
        new_params[name] = theta - dt(lr) * v
    state.model = state.model.replace(new_params)
    state.velocity = new_vel
    state.step += 1
    return state


# ---------------------------------------------------------------- PCO pieces

@dataclass
class TrainingBatchArtifacts:
    indices: np.ndarray
    x_clean: np.ndarray
    x_prev: np.ndarray
    g: np.ndarray = None
    delta: np.ndarray = None
    x_am: np.ndarray = None
    lam: np.ndarray = None
    x_train_raw: np.ndarray = None  # fusion result before projection
    x_train: np.ndarray = None
    x_curr: np.ndarray = None


def _per_example(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.astype(like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))


def adaptive_lambda(model: ModelParams, art: TrainingBatchArtifacts, y) -> np.ndarray:
    """True-class confidence at ``x_prev + delta``; a constant for the loss."""
    if art.delta is None:
        raise ValueError("adaptive_lambda needs the batch's delta")
    return confidence_true_class(model, art.x_prev + art.delta, y)


def _to_ball(x: np.ndarray, x_clean: np.ndarray, eps: float, clamp: bool) -> np.ndarray:
    out = x_clean + project_linf(x - x_clean, x.dtype.type(eps))
    return clamp_pixels(out) if clamp else out


def pco_fuse(art: TrainingBatchArtifacts, gamma: float, fusion_mode: str = "pco",
             projection_mode: str = "projected", epsilon: float = 0.0,
             clamp: bool = True) -> np.ndarray:
    """Blend the previous example with the amplified current one by lambda.

    pco: ``lam * x_prev + (1 - lam) * x_am`` with ``x_am = x_prev + gamma * delta``.
    amplified_clean uses the clean batch in place of ``x_prev``; plain_clean
    blends the clean batch with ``x_prev + delta`` (no amplification).
    Fills ``x_am``, ``x_train_raw`` and ``x_train`` on ``art``.
    """
    if art.lam is None or np.any((art.lam < 0) | (art.lam > 1)):
        raise ValueError("lambda must be set and lie in [0, 1]")
    for name in ("x_prev", "delta"):
        if getattr(art, name).shape != art.x_clean.shape:
            raise T.ShapeError(f"{name} shape {getattr(art, name).shape} does not match "
                               f"batch {art.x_clean.shape}")
    dt = art.x_prev.dtype.type
    art.x_am = art.x_prev + dt(gamma) * art.delta
    if fusion_mode == "pco":
        base, target = art.x_prev, art.x_am
    elif fusion_mode == "amplified_clean":
        base, target = art.x_clean, art.x_am
    elif fusion_mode == "plain_clean":
        base, target = art.x_clean, art.x_prev + art.delta
    else:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    lam = _per_example(art.lam, base)
    art.x_train_raw = lam * base + (dt(1) - lam) * target
    if projection_mode == "projected":
        art.x_train = _to_ball(art.x_train_raw, art.x_clean, epsilon, clamp)
    else:
        art.x_train = art.x_train_raw
    return art.x_train


# ---------------------------------------------------------------- epochs

BatchHook = Optional[Callable[[object], None]]


@dataclass
class _EpochStats:
    n: int = 0
    loss: float = 0.0
    ce: float = 0.0
    reg: float = 0.0
    delta_l2: float = 0.0
    lam: list = field(default_factory=list)
    lr: float = 0.0

    def add(self, nb: int, total, ce, reg, x_train, x_clean, lr):
        self.n += nb
        self.loss += nb * total
        self.ce += nb * ce
        self.reg += nb * reg
        d = (x_train.astype(np.float64) - x_clean).reshape(nb, -1)
        self.delta_l2 += float(np.sqrt((d * d).sum(axis=1)).sum())
        self.lr = lr

    def metrics(self, epoch: int, wall: float) -> EpochMetrics:
        n = max(self.n, 1)
        m = EpochMetrics(epoch=epoch, train_loss=self.loss / n, ce_component=self.ce / n,
                         reg_component=self.reg / n, delta_l2_mean=self.delta_l2 / n,
                         lr=self.lr, wall_time_s=wall)
        if self.lam:
            lam = np.concatenate(self.lam)
            m.lambda_mean = float(lam.astype(np.float64).mean())
            m.lambda_min = float(lam.min())
            m.lambda_max = float(lam.max())
        return m


def _rng(cfg: TrainConfig, stream: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream, epoch, batch])


def _param_update(state: TrainState, cfg: TrainConfig, loss_tensor, lr: float) -> None:
    grads, _ = T.backward(loss_tensor.tape, 1.0, GradRequest(wrt_params=True),
                          output=loss_tensor)
    sgd_step(state, {k: v.data for k, v in grads.items()}, lr, cfg.momentum, cfg.weight_decay)


def _ce_update(state: TrainState, cfg: TrainConfig, x_train, y, lr) -> float:
    logits, _ = forward_graph(state.model, x_train, track_input=False)
    loss = ce_loss(logits, y)
    _param_update(state, cfg, loss, lr)
    return loss.item()


def _batches(state: TrainState, train: Dataset, cfg: TrainConfig):
    steps = math.ceil(len(train) / cfg.batch_size)
    for b, batch in enumerate(batch_iter(train, cfg.batch_size, state.epoch, cfg.seed)):
        state.cursor = b
        yield b, batch, lr_at(cfg, state.epoch, b, steps)


def _finish(state: TrainState, stats: _EpochStats, t0: float):
    state.epoch += 1
    return state, stats.metrics(state.epoch, time.perf_counter() - t0)


def train_epoch_pco(state: TrainState, train: Dataset, cfg: TrainConfig,
                    on_batch: BatchHook = None):
    """One FGSM-PCO epoch; ``on_batch`` receives each batch's artifacts."""
    if cfg.method != "FGSM_PCO":
        raise ValueError(f"train_epoch_pco called with method {cfg.method}")
    t0 = time.perf_counter()
    stats = _EpochStats()
    eps, _ = cfg.budget(state.epoch)
    projected = cfg.projection_mode == "projected"
    for b, batch, lr in _batches(state, train, cfg):
        idx, x, y = batch.indices, batch.x, batch.y
        if state.epoch == 0 and not state.store.has(idx):
            x_prev = x + random_init_uniform(x.shape, eps, _rng(cfg, _INIT_STREAM, 0, b), x.dtype)
            if projected and cfg.clamp_pixels:
                x_prev = clamp_pixels(x_prev)
        else:
            x_prev = state.store.get("x_prev", idx)
        art = TrainingBatchArtifacts(indices=idx, x_clean=x, x_prev=x_prev)
        _, art.g = fgsm_step(state.model, x_prev, y, eps)
        art.delta = x.dtype.type(eps) * art.g
        if cfg.lambda_override is not None:
            art.lam = np.full(len(y), cfg.lambda_override, dtype=x.dtype)
        else:
            art.lam = adaptive_lambda(state.model, art, y)
        pco_fuse(art, cfg.gamma, cfg.fusion_mode, cfg.projection_mode, eps, cfg.clamp_pixels)
        art.x_curr = x_prev + art.delta
        if projected:
            art.x_curr = _to_ball(art.x_curr, x, eps, cfg.clamp_pixels)
            if attacks.BUDGET_CHECKS:
                check_budget(art.x_curr, x, eps)
                check_budget(art.x_train, x, eps)
        state.store.put(idx, x_prev=art.x_curr)
        total, ce, reg = pco_loss(state.model, art.x_train, art.x_curr, art.x_prev, y,
                                  cfg.beta, cfg.reg_space)
        _param_update(state, cfg, total, lr)
        stats.lam.append(art.lam)
        stats.add(len(y), total.item(), ce.item(), reg.item(), art.x_train, x, lr)
        if on_batch:
            on_batch(art)
    return _finish(state, stats, t0)


@dataclass
class MEPBatchArtifacts:
    indices: np.ndarray
    x_clean: np.ndarray
    eta_prev: np.ndarray
    momentum_prev: np.ndarray
    g_c: np.ndarray
    momentum: np.ndarray
    delta: np.ndarray
    eta: np.ndarray
    x_train: np.ndarray


def mep_update(eta, momentum, g_c, mu: float, alpha: float, epsilon: float):
    """Momentum-prior recursion for one visit of an example.

    Returns ``(momentum', delta, eta')`` where ``momentum' = mu * momentum + g_c``,
    ``delta = clip(eta + alpha * g_c)`` and ``eta' = clip(eta + alpha * sign(momentum'))``,
    clipping to [-epsilon, epsilon].
    """
    dt = eta.dtype.type
    momentum = dt(mu) * momentum + g_c
    delta = project_linf(eta + dt(alpha) * g_c, dt(epsilon))
    eta = project_linf(eta + dt(alpha) * np.sign(momentum), dt(epsilon))
    return momentum, delta, eta


def train_epoch_mep(state: TrainState, train: Dataset, cfg: TrainConfig,
                    on_batch: BatchHook = None):
    if cfg.method != "FGSM_MEP":
        raise ValueError(f"train_epoch_mep called with method {cfg.method}")
    t0 = time.perf_counter()
    stats = _EpochStats()
    eps, alpha = cfg.budget(state.epoch)
    reset = cfg.mep_reset_every and state.epoch > 0 and state.epoch % cfg.mep_reset_every == 0
    for b, batch, lr in _batches(state, train, cfg):
        idx, x, y = batch.indices, batch.x, batch.y
        if state.epoch == 0 and not state.store.has(idx):
            eta = random_init_uniform(x.shape, eps, _rng(cfg, _INIT_STREAM, 0, b), x.dtype)
            if cfg.clamp_pixels:
                eta = clamp_pixels(x + eta) - x
            mom = np.zeros_like(x)
        else:
            eta = state.store.get("eta", idx)
            mom = state.store.get("momentum", idx)
        if reset:
            mom = np.zeros_like(x)
        x_start = x + eta
        g_c = sign_gradient(state.model, x_start, y)
        new_mom, delta, new_eta = mep_update(eta, mom, g_c, cfg.mu, alpha, eps)
        x_train = x + delta
        if cfg.clamp_pixels:
            x_train = clamp_pixels(x_train)
            new_eta = clamp_pixels(x + new_eta) - x
        if attacks.BUDGET_CHECKS:
            check_budget(x_train, x, eps)
        state.store.put(idx, eta=new_eta, momentum=new_mom)
        loss = _ce_update(state, cfg, x_train, y, lr)
        stats.add(len(y), loss, loss, 0.0, x_train, x, lr)
        if on_batch:
            on_batch(MEPBatchArtifacts(idx, x, eta, mom, g_c, new_mom, delta, new_eta, x_train))
    return _finish(state, stats, t0)


def baseline_example(state: TrainState, cfg: TrainConfig, x, y, epoch: int, b: int) -> np.ndarray:
    """Adversarial training batch for the single-level baselines, generated from clean x."""
    eps, alpha = cfg.budget(epoch)
    if cfg.method == "FGSM_AT":
        x_adv, _ = fgsm_step(state.model, x, y, eps)
        x_adv = clamp_pixels(x_adv) if cfg.clamp_pixels else x_adv
    elif cfg.method == "FGSM_RS":
        delta = random_init_uniform(x.shape, eps, _rng(cfg, _INIT_STREAM, epoch, b), x.dtype)
        x0 = x + delta
        x0 = clamp_pixels(x0) if cfg.clamp_pixels else x0
        g = sign_gradient(state.model, x0, y)
        dt = x.dtype.type
        x_adv = x + project_linf((x0 - x) + dt(alpha) * g, dt(eps))
        x_adv = clamp_pixels(x_adv) if cfg.clamp_pixels else x_adv
    elif cfg.method == "PGD_AT":
        acfg = AttackConfig(epsilon=eps, alpha=alpha, steps=cfg.pgd_steps,
                            random_start=True, clamp_pixels=cfg.clamp_pixels, seed=cfg.seed)
        x_adv = pgd_attack(state.model, x, y, acfg, rng=_rng(cfg, _ATTACK_STREAM, epoch, b))
    else:
        raise ValueError(f"{cfg.method} is not a baseline method")
    if attacks.BUDGET_CHECKS:
        check_budget(x_adv, x, eps)
    return x_adv


def train_epoch_baseline(state: TrainState, train: Dataset, cfg: TrainConfig,
                         on_batch: BatchHook = None):
    t0 = time.perf_counter()
    stats = _EpochStats()
    for b, batch, lr in _batches(state, train, cfg):
        x_adv = baseline_example(state, cfg, batch.x, batch.y, state.epoch, b)
        loss = _ce_update(state, cfg, x_adv, batch.y, lr)
        stats.add(len(batch.y), loss, loss, 0.0, x_adv, batch.x, lr)
        if on_batch:
            on_batch((batch, x_adv))
    return _finish(state, stats, t0)


def train_epoch(state: TrainState, train: Dataset, cfg: TrainConfig, on_batch: BatchHook = None):
    """Dispatch on ``cfg.method``; non-finite values surface as :class:`TrainingDiverged`."""
    fn = {"FGSM_PCO": train_epoch_pco, "FGSM_MEP": train_epoch_mep}.get(cfg.method,
                                                                        train_epoch_baseline)
    state.cursor = -1
    try:
        return fn(state, train, cfg, on_batch)
    except TrainingDiverged:
        raise
    except T.NonFiniteError as exc:
        batch = state.cursor if state.cursor >= 0 else None
        raise TrainingDiverged(state.epoch + 1, batch, str(exc)) from exc


# ---------------------------------------------------------------- checkpoints

def save_train_state(path, state: TrainState, meta: Optional[dict] = None) -> None:
    """Model checkpoint plus velocity buffers and perturbation store."""
    extra = {f"velocity/{k}": v for k, v in state.velocity.items()}
    if state.store is not None:
        for slot, arr in state.store.arrays.items():
            extra[f"store/{slot}"] = arr
        extra["store/present"] = state.store.present.astype(state.model.params[
            next(iter(state.model.params))].dtype)
    info = {"epoch": state.epoch, "step": state.step, **(meta or {})}
    save_model(state.model, path, meta=info, extra=extra)


def load_train_state(path) -> tuple[TrainState, dict]:
    model, meta, extra = load_model(path)
    velocity = {k: extra[f"velocity/{k}"] for k in model.params}
    store = None
    slots = tuple(k.split("/", 1)[1] for k in extra
                  if k.startswith("store/") and k != "store/present")
    if slots:
        first = extra[f"store/{slots[0]}"]
        store = PerturbationStore(slots, len(first), first.shape[1:], first.dtype)
        for s in slots:
            store.arrays[s] = extra[f"store/{s}"].copy()
        store.present = extra["store/present"].astype(bool)
    state = TrainState(model=model, velocity=velocity, store=store,
                       epoch=int(meta["epoch"]), step=int(meta["step"]))
    return state, meta
