"""Optimizers with a spatial-scaling insertion point.

``sgd`` and ``sgd_momentum`` (with coupled weight decay) belong to the linear
family: their update is a fixed linear combination of current and past
gradients and weights, which is what makes spatial scaling equivalent to a
branched reparameterization. ``adam`` and ``adagrad`` are non-linear and carry
no such guarantee; they are provided for the scaling-position comparison.

The ``position`` argument controls where a scaling matrix multiplies in:

* ``pre``  -- the raw gradient is scaled before any optimizer arithmetic
              (weight decay, momentum, moment estimates all see the scaled
              gradient; the decay term itself is never scaled).
* ``post`` -- the optimizer update is computed from the unscaled gradient and
              the finished update vector is scaled right before the weight
              step (the adagrad* variant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

LINEAR_KINDS = ("sgd", "sgd_momentum")
ADAPTIVE_KINDS = ("adam", "adagrad")
KINDS = LINEAR_KINDS + ADAPTIVE_KINDS

_ADAGRAD_EPS = 1e-10  # torch default


@dataclass
class OptimizerConfig:
    kind: str = "sgd_momentum"
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}, expected one of {KINDS}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")

    @property
    def is_linear(self) -> bool:
        return self.kind in LINEAR_KINDS


@dataclass
class OptimizerState:
    """Per-parameter optimizer state; buffers start at zero."""

    cfg: OptimizerConfig
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def make_state(cfg: OptimizerConfig, like: np.ndarray) -> OptimizerState:
    like = np.asarray(like)
    buffers: dict[str, np.ndarray] = {}
    if cfg.kind == "sgd_momentum":
        buffers["velocity"] = np.zeros_like(like)
    elif cfg.kind == "adam":
        buffers["m"] = np.zeros_like(like)
        buffers["v"] = np.zeros_like(like)
    elif cfg.kind == "adagrad":
        buffers["accum"] = np.zeros_like(like)
    return OptimizerState(cfg=cfg, buffers=buffers)


def _check_scaling(scaling: np.ndarray | None, w: np.ndarray) -> np.ndarray | None:
    if scaling is None:
        return None
    scaling = np.asarray(scaling)
    if w.ndim != 4:
        raise ShapeError("gradient scaling requires a convolution-shaped (rank-4) parameter")
    if scaling.ndim != 2 or scaling.shape != w.shape[2:]:
        raise ShapeError(
            f"scaling shape {scaling.shape} does not match kernel spatial shape {w.shape[2:]}"
        )
    if not np.all(scaling > 0):
        raise ValueError("scaling matrix must be strictly positive")
    return scaling


def step(state: OptimizerState, w: np.ndarray, g: np.ndarray, lr: float,
         scaling: np.ndarray | None = None, position: str = "pre") -> np.ndarray:
    """One optimizer step; returns the updated weights, mutating ``state``.

    ``g`` is the raw loss gradient: weight decay is applied here, after the
    optional pre-scaling, never by the caller.
    """
    if position not in ("pre", "post"):
        raise ValueError(f"position must be 'pre' or 'post', got {position!r}")
    cfg = state.cfg
    if cfg.kind in ADAPTIVE_KINDS:
        return adaptive_step(state, w, g, lr, scaling=scaling, position=position)
    w = np.asarray(w)
    g = np.asarray(g)
    if w.shape != g.shape:
        raise ShapeError(f"weight shape {w.shape} vs gradient shape {g.shape}")
    scaling = _check_scaling(scaling, w)

    g_eff = g * scaling if (scaling is not None and position == "pre") else g
    d = g_eff + cfg.weight_decay * w if cfg.weight_decay != 0 else g_eff
    if cfg.kind == "sgd_momentum":
        v = cfg.momentum * state.buffers["velocity"] + d
        state.buffers["velocity"] = v
    else:
        v = d
    update = v * scaling if (scaling is not None and position == "post") else v
    state.step_count += 1
    return w - lr * update


def adaptive_step(state: OptimizerState, w: np.ndarray, g: np.ndarray, lr: float,
                  scaling: np.ndarray | None = None, position: str = "pre") -> np.ndarray:
    """Adam / adagrad step with the scaling inserted at ``position``."""
    cfg = state.cfg
    if cfg.kind not in ADAPTIVE_KINDS:
        raise ValueError(f"adaptive_step requires an adaptive optimizer, got {cfg.kind!r}")
    if position not in ("pre", "post"):
        raise ValueError(f"position must be 'pre' or 'post', got {position!r}")
    w = np.asarray(w)
    g = np.asarray(g)
    if w.shape != g.shape:
        raise ShapeError(f"weight shape {w.shape} vs gradient shape {g.shape}")
    scaling = _check_scaling(scaling, w)

    g_eff = g * scaling if (scaling is not None and position == "pre") else g
    e = g_eff + cfg.weight_decay * w if cfg.weight_decay != 0 else g_eff

    if cfg.kind == "adam":
        t = state.step_count + 1
        m = cfg.beta1 * state.buffers["m"] + (1.0 - cfg.beta1) * e
        v = cfg.beta2 * state.buffers["v"] + (1.0 - cfg.beta2) * e * e
        state.buffers["m"] = m
        state.buffers["v"] = v
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
    else:  # adagrad
        accum = state.buffers["accum"] + e * e
        state.buffers["accum"] = accum
        update = e / (np.sqrt(accum) + _ADAGRAD_EPS)

    if scaling is not None and position == "post":
        update = update * scaling
    state.step_count += 1
    return w - lr * update


@dataclass(frozen=True)
class LearningRateSchedule:
    """Constant or cosine-annealed learning rate over ``total_steps`` ticks."""

    kind: str = "constant"
    initial_lr: float = 0.1
    total_steps: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine_annealing"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def value(self, t: int) -> float:
        if t < 0:
            raise ValueError("schedule tick must be non-negative")
        if self.kind == "constant":
            return self.initial_lr
        return self.initial_lr * (1.0 + math.cos(math.pi * t / self.total_steps)) / 2.0
