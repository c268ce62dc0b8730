"""SGD with momentum and weight decay, the warmup + linear-scaling learning
rate policy, per-mini-batch cosine annealing, and the weight-averaging state
machine used over the final epochs of a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericsError, ParamVector


@dataclass
class OptimizerConfig:
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128

    def __post_init__(self):
        if self.base_lr <= 0.0:
            raise NumericsError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise NumericsError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise NumericsError("weight_decay must be non-negative")


class SgdOptimizer:
    """w <- w - lr * v, with v <- momentum * v + (g + weight_decay * w).

    Entries whose trainable flag is false are returned untouched; their
    velocity is never created.
    """

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
        if lr < 0.0:
            raise NumericsError("lr must be non-negative")
        grad_by_name = {e.name: e.value for e in grads.entries}
        new = params.copy()
        for e in new.entries:
            if not e.trainable:
                continue
            if e.name not in grad_by_name:
                raise NumericsError(f"missing gradient for trainable parameter {e.name}")
            g = grad_by_name[e.name]
            if g.shape != e.value.shape:
                raise NumericsError(f"gradient shape mismatch for {e.name}")
            g_eff = g + self.config.weight_decay * e.value
            if self.config.momentum > 0.0:
                v = self.velocity.get(e.name)
                v = g_eff if v is None else self.config.momentum * v + g_eff
                self.velocity[e.name] = v
            else:
                v = g_eff
            e.value -= lr * v
        return new


def sgd_step(params: ParamVector, grads: ParamVector, lr: float, config: OptimizerConfig) -> ParamVector:
    """Single stateless step (velocity starts at zero)."""
    return SgdOptimizer(config).step(params, grads, lr)


@dataclass
class CosineAnnealSchedule:
    eta_min: float
    eta_max: float
    steps_per_epoch: int

    def __post_init__(self):
        if not 0.0 <= self.eta_min <= self.eta_max:
            raise NumericsError("require 0 <= eta_min <= eta_max")
        if self.steps_per_epoch < 1:
            raise NumericsError("steps_per_epoch must be >= 1")


def cosine_anneal_lr(step: int, schedule: CosineAnnealSchedule) -> float:
    """Half-cosine decay from eta_max (step 0) to eta_min (step == steps_per_epoch)."""
    if not 0 <= step <= schedule.steps_per_epoch:
        raise NumericsError(f"step {step} outside [0, {schedule.steps_per_epoch}]")
    span = schedule.eta_max - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * step / schedule.steps_per_epoch))


@dataclass
class WarmupScalingPolicy:
    """Linear warmup to target_lr = num_workers * base_lr over warmup_epochs."""

    base_lr: float
    num_workers: int
    warmup_epochs: int = 5
    target_lr: float = field(init=False)

    def __post_init__(self):
        if self.base_lr <= 0.0 or self.num_workers < 1 or self.warmup_epochs < 0:
            raise NumericsError("invalid warmup policy")
        self.target_lr = self.num_workers * self.base_lr


def warmup_lr(epoch: int, step_in_epoch: int, policy: WarmupScalingPolicy, steps_per_epoch: int) -> float:
    """LR for a global mini-batch step; linear ramp during warmup, then flat."""
    if epoch < 0 or step_in_epoch < 0 or steps_per_epoch < 1:
        raise NumericsError("invalid step indices")
    total_warmup = policy.warmup_epochs * steps_per_epoch
    global_step = epoch * steps_per_epoch + step_in_epoch + 1  # 1-based
    if total_warmup == 0 or global_step >= total_warmup:
        return policy.target_lr
    return policy.target_lr * global_step / total_warmup


class SwaState:
    """Running arithmetic mean of end-of-epoch weights over the final
    swa_epochs epochs: avg <- (avg * n + current) / (n + 1)."""

    def __init__(self, swa_epochs: int = 10):
        if swa_epochs < 1:
            raise NumericsError("swa_epochs must be >= 1")
        self.swa_epochs = swa_epochs
        self.epochs_accumulated = 0
        self.averaged_weights: ParamVector | None = None

    def update(self, current: ParamVector) -> None:
        if self.epochs_accumulated >= self.swa_epochs:
            raise NumericsError("SWA accumulation past swa_epochs")
        if self.averaged_weights is None:
            self.averaged_weights = current.copy()
        else:
            n = self.epochs_accumulated
            avg = self.averaged_weights.to_flat()
            cur = current.to_flat()
            if avg.size != cur.size:
                raise NumericsError("SWA shape mismatch")
            self.averaged_weights = self.averaged_weights.from_flat((avg * n + cur) / (n + 1))
        self.epochs_accumulated += 1

    def finalize(self, model) -> None:
        """Replace the model's weights with the accumulated average."""
        if self.epochs_accumulated != self.swa_epochs:
            raise NumericsError(
                f"SWA incomplete: {self.epochs_accumulated}/{self.swa_epochs} epochs accumulated"
            )
        model.set_params(self.averaged_weights)


def validate_schedule_windows(epochs: int, warmup_epochs: int, swa_epochs: int, num_workers: int) -> None:
    """Warmup (leading epochs) and the SWA window (trailing epochs) must not
    overlap within one run."""
    effective_warmup = warmup_epochs if num_workers > 1 else 0
    if effective_warmup + swa_epochs > epochs:
        raise NumericsError(
            f"warmup ({effective_warmup}) and SWA ({swa_epochs}) windows overlap in {epochs} epochs"
        )
