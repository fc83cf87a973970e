"""Projection head, teacher-target construction, multi-view distillation
loss, center/EMA updates and the warmup freeze policy.

The teacher side is plain numpy everywhere: no gradient can reach teacher
weights or the center by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError
from .tensor import Tensor

PAIRING_POLICIES = ("one_view_globals", "all_globals")


@dataclass(frozen=True)
class HeadConfig:
    embed_dim: int = 64
    hidden_dim: int = 256
    bottleneck_dim: int = 64
    num_prototypes: int = 256

    def validate(self) -> None:
        if self.num_prototypes < 2:
            raise ConfigError("head.num_prototypes must be >= 2")
        for name in ("embed_dim", "hidden_dim", "bottleneck_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"head.{name} must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_frac: float = 0.1
    center_momentum: float = 0.9
    ema_momentum_start: float = 0.996
    ema_momentum_end: float = 1.0
    pairing: str = "one_view_globals"

    def validate(self) -> None:
        if not self.student_temp > 0:
            raise ConfigError("distill.student_temp must be > 0")
        if not (0 < self.teacher_temp_start <= self.teacher_temp_end):
            raise ConfigError("distill.teacher_temp range must be increasing and > 0")
        if self.teacher_temp_end > self.student_temp:
            raise ConfigError(
                "distill.teacher_temp_end must not exceed student_temp "
                "(teacher is the sharper distribution)"
            )
        if not 0.0 <= self.teacher_temp_warmup_frac <= 1.0:
            raise ConfigError("distill.teacher_temp_warmup_frac must be in [0, 1]")
        for name in ("center_momentum", "ema_momentum_start", "ema_momentum_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"distill.{name} must be in [0, 1]")
        if self.pairing not in PAIRING_POLICIES:
            raise ConfigError(f"distill.pairing must be one of {PAIRING_POLICIES}")


@dataclass
class DistillState:
    """Per-run mutable distillation state plus the current step's knobs."""

    center: np.ndarray
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.996

    def validate(self) -> None:
        if self.teacher_temp > self.student_temp:
            raise ConfigError("teacher_temp must be <= student_temp")
        for name in ("center_momentum", "ema_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")


def init_head_params(cfg: HeadConfig, rng, dtype=np.float32) -> dict[str, Tensor]:
    cfg.validate()

    def tn(shape, std=0.02):
        return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)

    params = {
        "fc1.weight": tn((cfg.embed_dim, cfg.hidden_dim)),
        "fc1.bias": np.zeros(cfg.hidden_dim),
        "fc2.weight": tn((cfg.hidden_dim, cfg.hidden_dim)),
        "fc2.bias": np.zeros(cfg.hidden_dim),
        "fc3.weight": tn((cfg.hidden_dim, cfg.bottleneck_dim)),
        "fc3.bias": np.zeros(cfg.bottleneck_dim),
        # weight-normalized prototype layer, unit columns at use time
        "prototypes": tn((cfg.bottleneck_dim, cfg.num_prototypes), std=1.0),
    }
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}


FINAL_LAYER_PARAMS = ("prototypes",)


def project(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(B, embed_dim) CLS embeddings -> (B, K) prototype logits.

    Bottleneck output is L2-normalized, and the final layer uses
    unit-norm prototype columns, so logits live in [-1, 1].
    """
    h = T.gelu(T.add(T.matmul(x, params["fc1.weight"]), params["fc1.bias"]))
    h = T.gelu(T.add(T.matmul(h, params["fc2.weight"]), params["fc2.bias"]))
    z = T.add(T.matmul(h, params["fc3.weight"]), params["fc3.bias"])
    z = T.l2_normalize(z, axis=-1)
    protos_n = T.l2_normalize(params["prototypes"], axis=0)
    return T.matmul(z, protos_n)


def _stable_softmax(z: np.ndarray, axis=-1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64)


def teacher_targets(logits: np.ndarray, state: DistillState) -> np.ndarray:
    """softmax((logits - center) / teacher_temp); pure numpy, no gradient."""
    if not state.teacher_temp > 0:
        raise ParameterError("teacher_temp must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    return _stable_softmax((logits - state.center) / state.teacher_temp)


def dino_loss(teacher_probs, student_logits: Tensor, student_temp: float,
              pairing: list[tuple[int, int]]) -> Tensor:
    """Mean cross-entropy over (teacher crop, student crop) pairs.

    `teacher_probs` is (n_teacher, K) numpy; `student_logits` is a
    (n_student, K) Tensor; `pairing` holds (teacher_row, student_row)
    index pairs and must not pair a crop with itself upstream.
    """
    if len(pairing) == 0:
        raise ConfigError("dino_loss needs at least one (teacher, student) pair")
    teacher_probs = np.asarray(teacher_probs)
    n_student, k = student_logits.shape
    weights = np.zeros((n_student, k), dtype=student_logits.dtype)
    for t_row, s_row in pairing:
        weights[s_row] += teacher_probs[t_row]
    logp = T.log_softmax(student_logits, temperature=student_temp, axis=-1)
    total = T.tsum(T.mul(Tensor(weights), logp))
    return T.mul(total, -1.0 / len(pairing))


def make_pairing(teacher_indices, n_crops: int) -> list[tuple[int, int]]:
    """All (teacher crop, student crop) pairs excluding the identical crop.

    Rows index the per-sample crop list for both networks; the teacher row
    t corresponds to the same physical crop as student row t.
    """
    pairs = []
    for t_row, crop_idx in enumerate(teacher_indices):
        for s in range(n_crops):
            if s != crop_idx:
                pairs.append((t_row, s))
    if not pairs:
        raise ConfigError("pairing produced zero (teacher, student) pairs")
    return pairs


def update_center(state: DistillState, teacher_logits_batch: np.ndarray,
                  momentum: float | None = None) -> np.ndarray:
    """center <- m*center + (1-m)*batch_mean(teacher logits); returns it."""
    m = state.center_momentum if momentum is None else momentum
    if not 0.0 <= m <= 1.0:
        raise ParameterError("center momentum must be in [0, 1]")
    batch = np.asarray(teacher_logits_batch)
    mean = np.mean(batch, axis=0, dtype=np.float64).astype(state.center.dtype)
    state.center = (m * state.center + (1.0 - m) * mean).astype(state.center.dtype)
    return state.center


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor],
               momentum: float) -> None:
    """teacher <- momentum*teacher + (1-momentum)*student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ParameterError("ema momentum must be in [0, 1]")
    if teacher.keys() != student.keys():
        raise ConfigError("teacher/student parameter names differ")
    for name, t_param in teacher.items():
        s_param = student[name]
        if t_param.shape != s_param.shape:
            raise ConfigError(f"ema shape mismatch for {name}")
        t_param.data = (
            momentum * t_param.data + (1.0 - momentum) * s_param.data
        ).astype(t_param.dtype)


def freeze_mask(step: int, warmup_steps: int) -> bool:
    """True while the final (weight-normalized) layer must receive no update;
    frozen strictly before the warmup end."""
    if step < 0:
        raise ParameterError("step must be >= 0")
    return step < warmup_steps


def teacher_temp_at(step: int, total_steps: int, cfg: DistillConfig) -> float:
    """Linear warmup from teacher_temp_start to teacher_temp_end over the
    first `teacher_temp_warmup_frac` of training."""
    warm = cfg.teacher_temp_warmup_frac * total_steps
    if warm <= 0 or step >= warm:
        return cfg.teacher_temp_end
    frac = step / warm
    return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start)


def ema_momentum_at(step: int, total_steps: int, cfg: DistillConfig) -> float:
    """Cosine ramp from ema_momentum_start to ema_momentum_end."""
    if total_steps <= 1:
        return cfg.ema_momentum_end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo, hi = cfg.ema_momentum_start, cfg.ema_momentum_end
    return hi - (hi - lo) * 0.5 * (1.0 + np.cos(np.pi * frac))


def entropy(probs: np.ndarray, axis=-1) -> np.ndarray:
    """Shannon entropy in nats, 0*log0 treated as 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -np.sum(terms, axis=axis)
