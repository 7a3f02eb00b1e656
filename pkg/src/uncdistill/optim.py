"""SGD with classic momentum and an L2 term, plus polynomial LR decay.

Update rule (per parameter tensor):

    v <- mu * v + g + wd * w
    w <- w - lr * v

The L2 term enters the gradient, not the schedule. Parameters are treated
as immutable values: the step returns fresh tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import EngineError, Tensor


@dataclass
class LrSchedule:
    lr_initial: float
    total_iterations: int
    power: float = 0.9

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise EngineError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.power <= 0:
            raise EngineError(f"power must be > 0, got {self.power}")
        if self.total_iterations < 1:
            raise EngineError(f"total_iterations must be >= 1, got {self.total_iterations}")


def poly_lr(schedule: LrSchedule, iteration: int) -> float:
    """lr_initial * (1 - iteration/total)^power; decays to 0 at the end."""
    if iteration < 0 or iteration > schedule.total_iterations:
        raise EngineError(
            f"iteration {iteration} outside [0, {schedule.total_iterations}]")
    frac = 1.0 - iteration / schedule.total_iterations
    return schedule.lr_initial * frac ** schedule.power


@dataclass
class OptimState:
    """Per-parameter velocities keyed like the parameter dict."""

    momentum: float
    weight_decay: float
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise EngineError(f"momentum must be in [0,1), got {self.momentum}")
        if not 0 <= self.weight_decay < 1:
            raise EngineError(f"weight_decay must be in [0,1), got {self.weight_decay}")


def sgd_momentum_step(params: dict, grads: dict, state: OptimState,
                      lr, decay_mask: dict | None = None) -> dict:
    """One update over a dict of named parameter tensors.

    `lr` is either a float applied to every parameter or a dict name -> rate
    (the two-group policy). `decay_mask`, when given, maps names to False to
    exempt them (e.g. biases) from the L2 term. Returns the new parameters;
    `state.velocity` is updated in place.
    """
    new_params = {}
    for name, w in params.items():
        g = grads[name]
        garr = g.data if isinstance(g, Tensor) else np.asarray(g)
        if garr.shape != w.shape:
            raise EngineError(
                f"sgd step: gradient shape {garr.shape} does not match "
                f"parameter {name!r} shape {w.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(w.data)
        elif v.shape != w.shape:
            raise EngineError(
                f"sgd step: velocity shape {v.shape} does not match "
                f"parameter {name!r} shape {w.shape}")
        decay = state.weight_decay
        if decay_mask is not None and not decay_mask.get(name, True):
            decay = 0.0
        step_lr = lr[name] if isinstance(lr, dict) else lr
        v = state.momentum * v + garr + decay * w.data
        state.velocity[name] = v
        new_params[name] = Tensor(w.data - w.dtype.type(step_lr) * v,
                                  requires_grad=w.requires_grad)
    return new_params
