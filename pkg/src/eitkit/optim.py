"""AdamW with cosine-annealed group learning rates, plus the Fourier
bandwidth schedule that periodically resamples the frequency banks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoding import FourierBank


class OptimError(Exception):
    """Non-finite gradients or inconsistent optimizer state."""


@dataclass
class AdamWConfig:
    lr_mlp: float = 5e-3
    lr_features: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    total_iters: int = 1000
    clip_norm: float | None = None


def cosine_factor(t: int, total_iters: int) -> float:
    """Annealing multiplier, 1 at t=0 down to 0 at t=total_iters."""
    t = min(max(t, 0), total_iters)
    return 0.5 * (1.0 + math.cos(math.pi * t / total_iters))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Group 'mlp_weight' takes lr_mlp and weight decay, 'mlp_bias' takes
    lr_mlp without decay, 'feature' takes lr_features without decay.
    The cosine factor uses the 0-based index of the step being applied.
    """

    def __init__(self, params: dict, groups: dict, config: AdamWConfig = AdamWConfig()):
        unknown = set(groups.values()) - {"mlp_weight", "mlp_bias", "feature"}
        if unknown:
            raise OptimError(f"unknown parameter groups: {unknown}")
        if set(params) != set(groups):
            raise OptimError("params and groups must have identical keys")
        self.config = config
        self.groups = dict(groups)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def _group_lr(self, group: str) -> float:
        base = self.config.lr_mlp if group.startswith("mlp") else self.config.lr_features
        return base * cosine_factor(self.t - 1, self.config.total_iters)

    def step(self, params: dict, grads: dict) -> None:
        """Apply one update in place; raises on non-finite gradients."""
        cfg = self.config
        self.t += 1
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for key, p in params.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for '{key}' at step {self.t}")
            m = self.m[key]
            v = self.v[key]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            lr = self._group_lr(self.groups[key])
            if self.groups[key] == "mlp_weight" and cfg.weight_decay > 0.0:
                p -= lr * cfg.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adamw_step(params: dict, grads: dict, optimizer: AdamW) -> dict:
    """Functional wrapper over AdamW.step, returning the updated dict."""
    optimizer.step(params, grads)
    return params


@dataclass(frozen=True)
class FreqSchedule:
    """Sigmoidal base-bandwidth growth with periodic bank resampling."""

    s_min: float = 2.0
    s_max: float = 12.0
    steepness: float = 0.02
    midpoint: float = 400.0
    resample_every: int = 100

    def validate(self) -> None:
        if not self.s_min < self.s_max:
            raise OptimError("require s_min < s_max")
        if self.steepness <= 0:
            raise OptimError("steepness must be positive")
        if self.resample_every < 1:
            raise OptimError("resample interval must be >= 1")


def schedule_s0(t: float, schedule: FreqSchedule) -> float:
    """Base bandwidth at iteration t."""
    schedule.validate()
    z = -schedule.steepness * (t - schedule.midpoint)
    # clamp the exponent so extreme schedules saturate instead of overflowing
    z = min(max(z, -700.0), 700.0)
    return schedule.s_min + (schedule.s_max - schedule.s_min) / (1.0 + math.exp(z))


def maybe_resample(t: int, schedule: FreqSchedule, bank: FourierBank) -> FourierBank:
    """Resample every bank level when t hits the schedule interval."""
    schedule.validate()
    if t % schedule.resample_every == 0:
        bank.resample(schedule_s0(t, schedule))
    return bank
