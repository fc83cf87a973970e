"""Three-phase learning-rate schedule and decoupled AdamW."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .tensor import Tensor


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 2_000
    warmup_steps: int = 114
    constant_steps: int = 457
    peak_lr: float = 1e-3
    final_lr: float = 2e-6

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("schedule.total_steps must be >= 1")
        if self.warmup_steps < 0 or self.constant_steps < 0:
            raise ConfigError("schedule phases must be >= 0")
        if self.warmup_steps + self.constant_steps > self.total_steps:
            raise ConfigError("schedule.warmup+constant must be <= total_steps")
        if not self.peak_lr > self.final_lr > 0:
            raise ConfigError("schedule requires peak_lr > final_lr > 0")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear 0->peak over warmup, flat peak, then cosine peak->final."""
    if step < 0 or step > cfg.total_steps:
        raise UsageError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.peak_lr
        return cfg.peak_lr * step / cfg.warmup_steps
    flat_end = cfg.warmup_steps + cfg.constant_steps
    if step <= flat_end:
        return cfg.peak_lr
    span = cfg.total_steps - flat_end
    frac = (step - flat_end) / span
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (
        1.0 + math.cos(math.pi * frac)
    )


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.04
    clip_grad_norm: float | None = 3.0

    def validate(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optim betas must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("optim.eps must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("optim.weight_decay must be >= 0")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ConfigError("optim.clip_grad_norm must be > 0 or null")


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def no_decay_param(name: str, tensor: Tensor) -> bool:
    """Biases and norm gains (all 1-D parameters) skip weight decay."""
    return tensor.ndim <= 1


class AdamW:
    """Decoupled AdamW over a named parameter dict.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    Frozen parameters are skipped entirely (no moment update, no decay),
    and each parameter keeps its own bias-correction step count so a
    late-unfrozen parameter starts its trajectory cleanly.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.state: dict[str, _Slot] = {
            name: _Slot(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
        }
        self.no_decay = {n for n, p in params.items() if no_decay_param(n, p)}

    def clip_gradients(self) -> float:
        """Scale all gradients so the global L2 norm is at most the cap."""
        cap = self.cfg.clip_grad_norm
        sq = 0.0
        for p in self.params.values():
            if p.grad is not None:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        norm = math.sqrt(sq)
        if cap is not None and norm > cap and norm > 0:
            scale = cap / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = (p.grad * scale).astype(p.grad.dtype)
        return norm

    def step(self, lr: float, frozen: set[str] | frozenset[str] = frozenset()):
        if lr < 0:
            raise UsageError("learning rate must be >= 0")
        c = self.cfg
        for name, p in self.params.items():
            if name in frozen:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not math.isfinite(float(np.sum(g, dtype=np.float64))):
                raise NumericError(f"non-finite gradient for {name}")
            slot = self.state[name]
            slot.t += 1
            slot.m = (c.beta1 * slot.m + (1.0 - c.beta1) * g).astype(p.dtype)
            slot.v = (c.beta2 * slot.v + (1.0 - c.beta2) * g * g).astype(p.dtype)
            mhat = slot.m / (1.0 - c.beta1**slot.t)
            vhat = slot.v / (1.0 - c.beta2**slot.t)
            update = mhat / (np.sqrt(vhat) + c.eps)
            if c.weight_decay and name not in self.no_decay:
                update = update + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, slot in self.state.items():
            out[f"optim.m.{name}"] = slot.m
            out[f"optim.v.{name}"] = slot.v
            out[f"optim.t.{name}"] = np.array([slot.t], dtype=np.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, slot in self.state.items():
            slot.m = tensors[f"optim.m.{name}"].astype(slot.m.dtype)
            slot.v = tensors[f"optim.v.{name}"].astype(slot.v.dtype)
            slot.t = int(tensors[f"optim.t.{name}"][0])


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
               beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.04):
    """Single-tensor functional AdamW step (state dict holds m, v, t)."""
    m = state.get("m", np.zeros_like(param))
    v = state.get("v", np.zeros_like(param))
    t = state.get("t", 0) + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    new = param - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
    state.update(m=m, v=v, t=t)
    return new
