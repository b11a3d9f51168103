"""Adam with bias correction and the warmup / inverse-square-root schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.997
    adam_eps: float = 1e-8
    max_lr: float = 0.002
    warmup_steps: int = 2000
    label_smoothing: float = 0.1
    batch_tokens: int = 1024
    total_steps: int = 1000
    grad_accum: int = 1
    log_every: int = 100
    valid_every: int = 500
    early_stop_patience: int = 3

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ConfigError(f"need 0 < beta1 < beta2 < 1, got ({self.beta1}, {self.beta2})")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.max_lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("max_lr and adam_eps must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        for name in ("batch_tokens", "grad_accum", "log_every", "valid_every", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``max_lr`` at ``warmup_steps``, then max_lr * sqrt(warmup / step)."""
    if step < 1:
        raise ContractError(f"lr_at expects step >= 1, got {step}")
    if step <= cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    return cfg.max_lr * math.sqrt(cfg.warmup_steps / step)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def adam_step(params, grads, state: AdamState, t: int, lr: float,
              betas=(0.9, 0.997), eps: float = 1e-8, names=None) -> None:
    """In-place bias-corrected Adam update of ``params`` (a list of Tensors).

    All gradients are checked before any parameter moves; a non-finite one
    raises :class:`DivergenceError` naming the parameter.
    """
    if t < 1:
        raise ContractError("Adam step counter starts at 1")
    names = names or [f"param[{i}]" for i in range(len(params))]
    for name, g in zip(names, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name}", step=t)
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t


class Adam:
    def __init__(self, named_params, cfg: OptimConfig):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.cfg = cfg
        self.state = AdamState({}, {})

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.state.t + 1, lr,
                  (self.cfg.beta1, self.cfg.beta2), self.cfg.adam_eps, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
