"""Additive-angular-margin softmax objective, Adam, and the cyclical
learning-rate schedule (linear warm-up then cosine decay, peak decaying by a
fixed factor each cycle)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tape, Tensor
from .errors import NumericError, ShapeError, UsageError


@dataclass(frozen=True)
class AamConfig:
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise UsageError(f"margin {self.margin} outside [0, pi/2)")
        if self.scale <= 0:
            raise UsageError("scale must be positive")


def aam_loss(tape: Tape, class_w: Tensor, embeddings: Tensor,
             labels, cfg: AamConfig = AamConfig()) -> Tensor:
    """Mean AAM-softmax loss over a (B, E) batch of embeddings.

    Cosines come from L2-normalized embeddings and class rows; the target
    logit uses cos(theta + m) computed through the sqrt identity, with
    theta + m clamped at pi (constant -1 branch, zero gradient there).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.data.ndim != 2:
        raise ShapeError("aam_loss expects (B, E) embeddings")
    B, E = embeddings.data.shape
    C = class_w.data.shape[0]
    if class_w.data.shape != (C, E):
        raise ShapeError("class weight matrix must be (C, E)")
    if labels.shape != (B,):
        raise ShapeError("labels must have one entry per embedding")
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError(f"label out of range for {C} classes")

    emb_n = tape.l2norm_rows(embeddings)
    w_n = tape.l2norm_rows(class_w)
    cos = tape.matmul(emb_n, tape.transpose(w_n))  # (B, C)

    cos_m = math.cos(cfg.margin)
    sin_m = math.sin(cfg.margin)
    sin2 = tape.shift(tape.scale(tape.mul(cos, cos), -1.0), 1.0)
    sin = tape.sqrt(tape.clamp_min(sin2, 1e-12))
    phi = tape.sub(tape.scale(cos, cos_m), tape.scale(sin, sin_m))
    # theta + m <= pi  <=>  cos(theta) > -cos(m); else pin at cos(pi) = -1
    valid = cos.data > -cos_m
    phi = tape.where_const(phi, valid, -1.0)

    onehot = np.zeros((B, C), dtype=bool)
    onehot[np.arange(B), labels] = True
    logits = tape.add(tape.where_const(phi, onehot, 0.0),
                      tape.where_const(cos, ~onehot, 0.0))
    return tape.cross_entropy_mean(tape.scale(logits, cfg.scale), labels)


@dataclass(frozen=True)
class ScheduleConfig:
    iters_per_epoch: int
    cycles: int = 4
    epochs_per_cycle: int = 20
    warmup_iters: int = 1000
    peak_lr: float = 0.001
    cycle_decay: float = 0.75

    def __post_init__(self):
        for fname in ("iters_per_epoch", "cycles", "epochs_per_cycle",
                      "warmup_iters", "peak_lr", "cycle_decay"):
            if getattr(self, fname) <= 0:
                raise UsageError(f"{fname} must be positive")
        if self.warmup_iters >= self.cycle_len:
            raise UsageError("warm-up must be shorter than a cycle")

    @property
    def cycle_len(self) -> int:
        return self.epochs_per_cycle * self.iters_per_epoch

    @property
    def total_iters(self) -> int:
        return self.cycles * self.cycle_len


def lr_at(iteration: int, cfg: ScheduleConfig) -> float:
    """Learning rate for one iteration of the cyclical schedule."""
    if iteration < 0 or iteration >= cfg.total_iters:
        raise UsageError(f"iteration {iteration} outside schedule of {cfg.total_iters}")
    cycle, j = divmod(iteration, cfg.cycle_len)
    peak = cfg.peak_lr * cfg.cycle_decay ** cycle
    if j <= cfg.warmup_iters:
        return peak * j / cfg.warmup_iters
    frac = (j - cfg.warmup_iters) / (cfg.cycle_len - cfg.warmup_iters)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamState:
    """First/second moments per parameter name plus the step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(params: list[Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.t += 1
    t = state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {p.data.shape} "
                             f"for '{p.name}'")
        if not np.all(np.isfinite(g)):
            raise NumericError(p.name, "non-finite gradient")
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
