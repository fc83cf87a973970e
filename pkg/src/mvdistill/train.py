"""Pretraining loop: multi-crop sampling -> student/teacher forward ->
distillation loss -> AdamW -> center/EMA updates, with a per-step loss log
and bit-exact periodic checkpoints.

Determinism contract: every random draw derives from (seed, step, slot) or
(seed, step) via splitmix64, so loss logs are bit-identical across reruns,
across `workers` settings, and across checkpoint/resume boundaries.
"""

from __future__ import annotations

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import sample_crop_batch
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, config_to_dict
from .errors import ConfigError, DataError, NumericError
from .ingest import group_by_study, load_studies
from .objective import (
    DistillState,
    ema_momentum_at,
    ema_update,
    entropy,
    freeze_mask,
    init_head_params,
    make_pairing,
    project,
    teacher_targets,
    teacher_temp_at,
    update_center,
)
from .optim import AdamW, lr_at
from .seeding import TAG_BATCH, TAG_CROPS, TAG_DROPPATH, TAG_INIT, rng_from
from .tensor import Tensor
from .vit import ViTEncoder, init_vit_params

FROZEN_FINAL = frozenset({"head.prototypes"})
LOG_HEADER = "step,lr,loss,teacher_entropy,ema_momentum"


@dataclass
class TrainState:
    config: RunConfig
    mode: str
    student: dict[str, Tensor]   # "encoder.*" + "head.*"
    teacher: dict[str, Tensor]
    optimizer: AdamW
    distill: DistillState
    step: int = 0
    encoders: dict = field(default_factory=dict)

    @property
    def student_enc_model(self) -> ViTEncoder:
        if "student" not in self.encoders:
            self.encoders["student"] = ViTEncoder(self.config.model,
                                                  params=self.student_encoder)
        return self.encoders["student"]

    @property
    def teacher_enc_model(self) -> ViTEncoder:
        if "teacher" not in self.encoders:
            self.encoders["teacher"] = ViTEncoder(self.config.model,
                                                  params=self.teacher_encoder)
        return self.encoders["teacher"]

    @property
    def student_encoder(self) -> dict[str, Tensor]:
        return {k[len("encoder."):]: v for k, v in self.student.items()
                if k.startswith("encoder.")}

    @property
    def teacher_encoder(self) -> dict[str, Tensor]:
        return {k[len("encoder."):]: v for k, v in self.teacher.items()
                if k.startswith("encoder.")}

    @property
    def student_head(self) -> dict[str, Tensor]:
        return {k[len("head."):]: v for k, v in self.student.items()
                if k.startswith("head.")}

    @property
    def teacher_head(self) -> dict[str, Tensor]:
        return {k[len("head."):]: v for k, v in self.teacher.items()
                if k.startswith("head.")}


def init_train_state(config: RunConfig, mode: str) -> TrainState:
    config.validate()
    if mode not in ("multi", "single"):
        raise ConfigError(f"mode must be multi or single, got {mode!r}")
    rng = rng_from(config.seed, TAG_INIT)
    enc = init_vit_params(config.model, rng)
    head = init_head_params(config.head, rng)
    student = {f"encoder.{k}": v for k, v in enc.items()}
    student.update({f"head.{k}": v for k, v in head.items()})
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    optimizer = AdamW(student, config.optim)
    distill = DistillState(
        center=np.zeros(config.head.num_prototypes, dtype=np.float32),
        student_temp=config.distill.student_temp,
        teacher_temp=config.distill.teacher_temp_start,
        center_momentum=config.distill.center_momentum,
        ema_momentum=config.distill.ema_momentum_start,
    )
    return TrainState(config=config, mode=mode, student=student,
                      teacher=teacher, optimizer=optimizer, distill=distill)


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {f"student.{k}": v.data for k, v in state.student.items()}
    tensors.update({f"teacher.{k}": v.data for k, v in state.teacher.items()})
    tensors.update(state.optimizer.state_tensors())
    tensors["distill.center"] = state.distill.center
    return tensors


def save_train_checkpoint(state: TrainState, out_dir) -> None:
    cfg_dict = config_to_dict(state.config)
    save_checkpoint(
        out_dir, state.step, cfg_dict, _state_tensors(state),
        extra_meta={"mode": state.mode, "config_hash": config_hash(state.config)},
    )


def restore_train_state(ckpt: Checkpoint, config: RunConfig) -> TrainState:
    mode = ckpt.meta.get("mode", "multi")
    state = init_train_state(config, mode)
    for k, v in state.student.items():
        v.data = ckpt.tensors[f"student.{k}"].astype(v.dtype)
    for k, v in state.teacher.items():
        v.data = ckpt.tensors[f"teacher.{k}"].astype(v.dtype)
    state.optimizer.load_state_tensors(ckpt.tensors)
    state.distill.center = ckpt.tensors["distill.center"].astype(np.float32)
    state.step = ckpt.step
    return state


def _collect_batches(studies, config: RunConfig, mode: str, step: int, workers: int):
    batch_size = config.train.batch_size
    rng_pick = rng_from(config.seed, TAG_BATCH, step)
    picks = rng_pick.integers(0, len(studies), size=batch_size)

    def build(slot: int):
        rng = rng_from(config.seed, TAG_CROPS, step, slot)
        return sample_crop_batch(studies[int(picks[slot])], config.augment, rng,
                                 mode=mode, teacher_views=config.distill.pairing)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, range(batch_size)))
    return [build(slot) for slot in range(batch_size)]


def train_step(state: TrainState, studies, step: int, workers: int = 1):
    """One optimization step; returns the loss-log fields."""
    config = state.config
    total = config.schedule.total_steps
    lr = lr_at(step, config.schedule)
    state.distill.teacher_temp = teacher_temp_at(step, total, config.distill)
    state.distill.ema_momentum = ema_momentum_at(step, total, config.distill)

    batches = _collect_batches(studies, config, state.mode, step, workers)
    b = len(batches)
    g_per = 2 * config.augment.global_crop.count_per_view
    l_per = 2 * config.augment.local_crop.count_per_view
    n_crops = g_per + l_per

    global_imgs = np.stack(
        [c.image for cb in batches for c in cb.crops[:g_per]]
    )
    local_imgs = (
        np.stack([c.image for cb in batches for c in cb.crops[g_per:]])
        if l_per else None
    )

    student_enc = state.student_enc_model
    teacher_enc = state.teacher_enc_model

    rng_dp_g = rng_from(config.seed, TAG_DROPPATH, step, 0)
    rng_dp_l = rng_from(config.seed, TAG_DROPPATH, step, 1)
    cls_g, _, _ = student_enc.forward_batch(global_imgs, training=True, rng=rng_dp_g)
    logits_parts = [project(cls_g, state.student_head)]
    if local_imgs is not None:
        cls_l, _, _ = student_enc.forward_batch(local_imgs, training=True,
                                                rng=rng_dp_l)
        logits_parts.append(project(cls_l, state.student_head))
    student_logits = T.concat(logits_parts, axis=0) if len(logits_parts) > 1 \
        else logits_parts[0]

    # teacher consumes its crops (always globals) without gradients
    teacher_rows = []  # (sample, crop_idx)
    for i, cb in enumerate(batches):
        for crop_idx in cb.teacher_indices:
            if cb.crops[crop_idx].kind != "global":
                raise ConfigError("teacher crops must be globals")
            teacher_rows.append((i, crop_idx))
    teacher_imgs = np.stack(
        [global_imgs[i * g_per + c] for i, c in teacher_rows]
    )
    with T.no_grad():
        t_cls, _, _ = teacher_enc.forward_batch(teacher_imgs, training=False)
        teacher_logits = project(t_cls, state.teacher_head).data.astype(np.float64)
    teacher_probs = teacher_targets(teacher_logits, state.distill)

    def student_row(i: int, crop_idx: int) -> int:
        if crop_idx < g_per:
            return i * g_per + crop_idx
        return b * g_per + i * l_per + (crop_idx - g_per)

    # batched equivalent of mean-over-samples of per-sample dino_loss:
    # pair weight = 1 / (batch * pairs_in_sample)
    k = config.head.num_prototypes
    teacher_count = [sum(1 for r in teacher_rows if r[0] == i) for i in range(b)]
    weights = np.zeros((b * n_crops, k), dtype=np.float32)
    for t_row, (i, t_crop) in enumerate(teacher_rows):
        pairing = make_pairing([t_crop], n_crops)
        w = 1.0 / (b * teacher_count[i] * len(pairing))
        for _, s_crop in pairing:
            weights[student_row(i, s_crop)] += w * teacher_probs[t_row]
    logp = T.log_softmax(student_logits, temperature=state.distill.student_temp,
                         axis=-1)
    loss = T.mul(T.tsum(T.mul(Tensor(weights.astype(student_logits.dtype)), logp)),
                 -1.0)

    if not math.isfinite(float(loss.data)):
        raise NumericError("non-finite training loss")
    for p in state.student.values():
        p.grad = None
    T.backward(loss)

    frozen = FROZEN_FINAL if freeze_mask(step, config.freeze_steps) else frozenset()
    state.optimizer.clip_gradients()
    state.optimizer.step(lr, frozen=frozen)
    update_center(state.distill, teacher_logits)
    ema_update(state.teacher, state.student, state.distill.ema_momentum)
    state.step = step + 1

    mean_entropy = float(np.mean(entropy(teacher_probs)))
    return lr, float(loss.data), mean_entropy, state.distill.ema_momentum


def _format_row(step, lr, loss, ent, momentum) -> str:
    return (f"{step},{float(lr)!r},{float(loss)!r},"
            f"{float(ent)!r},{float(momentum)!r}")


def prepare_studies(manifest_records, manifest_dir, mode: str):
    """Load study images; in multi mode only studies with >= 2 views count."""
    studies = load_studies(manifest_records, manifest_dir)
    if mode == "multi":
        studies = [s for s in studies if len(s.views) >= 2]
    if not studies:
        raise DataError("no usable studies in manifest for this mode")
    return sorted(studies, key=lambda s: s.study_id)


def pretrain(manifest_records, manifest_dir, config: RunConfig, mode: str,
             out_dir, workers: int = 1, resume_from=None,
             log_stream=None) -> Path:
    """Run (or resume) pretraining; writes loss.csv and ckpt-* directories
    under out_dir and returns the final checkpoint path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    studies = prepare_studies(manifest_records, manifest_dir, mode)

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        state = restore_train_state(ckpt, config)
        if state.mode != mode:
            raise ConfigError(
                f"checkpoint was trained in mode {state.mode!r}, not {mode!r}"
            )
    else:
        state = init_train_state(config, mode)

    total = config.schedule.total_steps
    interval = config.train.checkpoint_interval
    loss_path = out_dir / "loss.csv"
    final_dir = out_dir / "ckpt-final"
    with loss_path.open("w", encoding="ascii") as log:
        log.write(LOG_HEADER + "\n")
        for step in range(state.step, total):
            try:
                lr, loss, ent, momentum = train_step(state, studies, step, workers)
            except NumericError:
                # leave the last good periodic checkpoint in place
                print(
                    f"error:numeric:aborted at step {step}; last checkpoint kept",
                    file=sys.stderr,
                )
                raise
            row = _format_row(step, lr, loss, ent, momentum)
            log.write(row + "\n")
            if log_stream is not None:
                print(row, file=log_stream)
            if (step + 1) % interval == 0 and (step + 1) < total:
                save_train_checkpoint(state, out_dir / f"ckpt-{step + 1:08d}")
    save_train_checkpoint(state, final_dir)
    return final_dir
