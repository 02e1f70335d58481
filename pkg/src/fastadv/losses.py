"""Cross-entropy and the fused-example regularized training loss."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .models import ModelParams, forward_graph
from .tensor import Tape, Tensor


def ce_loss(logits: Tensor, y) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[y]``."""
    return T.neg(T.mean(T.pick(T.log_softmax(logits), y)))


def l1_msd(p: Tensor, q: Tensor) -> Tensor:
    """Mean squared difference over batch and classes."""
    if p.shape != q.shape:
        raise T.ShapeError(f"l1_msd: shape mismatch {p.shape} vs {q.shape}")
    return T.mean(T.square(T.sub(p, q)))


def pco_loss(model: ModelParams, x_train, x_curr, x_prev, y, beta: float,
             space: str = "prob", tape: Tape | None = None):
    """Cross-entropy on the fused batch plus a consistency term.

    ``total = ce(f(x_train), y)
              + beta * (msd(P(x_curr), P(x_prev)) - msd(P(x_train), P(x_curr)))``

    where P is the softmax output (``space="prob"``) or the raw logits
    (``space="logits"``). All three batches are constants; gradients reach the
    parameters through the three forward passes, which share one tape.
    With ``beta == 0`` only the fused batch is evaluated.

    Returns ``(total, ce_component, reg_component)`` as tape-recorded tensors.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if space not in ("prob", "logits"):
        raise ValueError(f"space must be 'prob' or 'logits', got {space!r}")
    shapes = {np.shape(x_train), np.shape(x_curr), np.shape(x_prev)}
    if len(shapes) != 1:
        raise T.ShapeError(f"pco_loss: batch shapes differ: {sorted(shapes)}")
    logits_train, tape = forward_graph(model, x_train, tape=tape, track_input=False)
    ce = ce_loss(logits_train, y)
    if beta == 0:
        reg = Tensor(0.0, dtype=ce.dtype)
        return ce, ce, reg
    logits_curr, _ = forward_graph(model, x_curr, tape=tape, track_input=False)
    logits_prev, _ = forward_graph(model, x_prev, tape=tape, track_input=False)
    if space == "prob":
        p_train, p_curr, p_prev = (T.softmax(z) for z in (logits_train, logits_curr, logits_prev))
    else:
        p_train, p_curr, p_prev = logits_train, logits_curr, logits_prev
    reg = T.sub(l1_msd(p_curr, p_prev), l1_msd(p_train, p_curr))
    total = T.add(ce, T.scale(reg, beta))
    return total, ce, reg
