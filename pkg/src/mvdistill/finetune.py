"""Supervised fine-tuning: unfrozen encoder + classification head trained
with multilabel BCE, heavy geometric augmentation, AP/ROC-AUC reporting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import FinetuneConfig, RunConfig
from .embed import encoder_from_checkpoint
from .errors import ConfigError, DataError, MetricUndefinedError
from .imageops import (
    adjust_brightness,
    adjust_contrast,
    adjust_sharpness,
    affine_matrix,
    autocontrast,
    hflip,
    perspective_matrix,
    resize_bilinear,
    warp_projective,
)
from .ingest import ManifestRecord, load_image
from .metrics import MetricsReport, average_precision, roc_auc
from .objective import entropy  # noqa: F401  (re-export convenience)
from .optim import AdamW, OptimConfig
from .seeding import TAG_FINETUNE, rng_from
from .tensor import Tensor
from .vit import ViTEncoder, init_block_params, transformer_block

RANDAUGMENT_OPS = (
    "rotate", "shear_x", "shear_y", "translate_x", "translate_y",
    "contrast", "brightness", "sharpness", "autocontrast",
)
RA_N = 3
RA_M = 6  # magnitude on the usual 0..30 scale


def _ra_apply(img: np.ndarray, op: str, rng) -> np.ndarray:
    size = img.shape[0]
    frac = RA_M / 30.0
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if op == "rotate":
        return warp_projective(img, affine_matrix(angle_deg=sign * 30.0 * frac))
    if op == "shear_x":
        deg = math.degrees(math.atan(0.3 * frac))
        return warp_projective(img, affine_matrix(shear_deg=(sign * deg, 0.0)))
    if op == "shear_y":
        deg = math.degrees(math.atan(0.3 * frac))
        return warp_projective(img, affine_matrix(shear_deg=(0.0, sign * deg)))
    if op == "translate_x":
        return warp_projective(img, affine_matrix(translate=(sign * 0.3 * frac * size, 0)))
    if op == "translate_y":
        return warp_projective(img, affine_matrix(translate=(0, sign * 0.3 * frac * size)))
    if op == "contrast":
        return adjust_contrast(img, 1.0 + sign * 0.9 * frac)
    if op == "brightness":
        return adjust_brightness(img, 1.0 + sign * 0.9 * frac)
    if op == "sharpness":
        return adjust_sharpness(img, 1.0 + sign * 0.9 * frac)
    if op == "autocontrast":
        return autocontrast(img)
    raise ConfigError(f"unknown randaugment op {op!r}")


def augment_finetune(image: np.ndarray, size: int, rng) -> np.ndarray:
    """The fine-tuning pipeline: resize, flip p=0.5, rotate +-30deg, affine
    (translate 10%, scale 0.8-1.2, shear +-10deg), perspective 0.5 p=0.5,
    then a reduced grayscale RandAugment (N=3, M=6)."""
    img = resize_bilinear(np.asarray(image, dtype=np.float64), size, size)
    if rng.random() < 0.5:
        img = hflip(img)
    mat = affine_matrix(
        angle_deg=rng.uniform(-30.0, 30.0),
        translate=(rng.uniform(-0.1, 0.1) * size, rng.uniform(-0.1, 0.1) * size),
        scale=rng.uniform(0.8, 1.2),
        shear_deg=(rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)),
    )
    img = warp_projective(img, mat)
    if rng.random() < 0.5:
        img = warp_projective(img, perspective_matrix(rng, size, 0.5))
    for _ in range(RA_N):
        op = RANDAUGMENT_OPS[int(rng.integers(0, len(RANDAUGMENT_OPS)))]
        img = _ra_apply(img, op, rng)
    return np.clip(img, 0.0, 255.0)


# -- heads ------------------------------------------------------------------


def init_head(kind: str, embed_dim: int, n_labels: int, rng,
              head_dim: int = 64, depth: int = 2) -> dict[str, Tensor]:
    if kind == "linear":
        w = np.clip(rng.normal(0.0, 0.02, size=(embed_dim, n_labels)), -0.04, 0.04)
        return {
            "fc.weight": Tensor(w.astype(np.float32), requires_grad=True),
            "fc.bias": Tensor(np.zeros(n_labels, dtype=np.float32),
                              requires_grad=True),
        }
    if kind == "transformer":
        params: dict[str, Tensor] = {}
        proj = np.clip(rng.normal(0.0, 0.02, size=(embed_dim, head_dim)), -0.04, 0.04)
        params["proj.weight"] = Tensor(proj.astype(np.float32), requires_grad=True)
        params["proj.bias"] = Tensor(np.zeros(head_dim, dtype=np.float32),
                                     requires_grad=True)
        cls = np.clip(rng.normal(0.0, 0.02, size=(1, 1, head_dim)), -0.04, 0.04)
        params["cls_token"] = Tensor(cls.astype(np.float32), requires_grad=True)
        for i in range(depth):
            params.update(init_block_params(rng, head_dim, 4 * head_dim,
                                            f"blocks.{i}."))
        params["norm.gain"] = Tensor(np.ones(head_dim, dtype=np.float32),
                                     requires_grad=True)
        params["norm.bias"] = Tensor(np.zeros(head_dim, dtype=np.float32),
                                     requires_grad=True)
        wout = np.clip(rng.normal(0.0, 0.02, size=(head_dim, n_labels)), -0.04, 0.04)
        params["fc.weight"] = Tensor(wout.astype(np.float32), requires_grad=True)
        params["fc.bias"] = Tensor(np.zeros(n_labels, dtype=np.float32),
                                   requires_grad=True)
        return params
    raise ConfigError(f"unknown finetune head {kind!r}")


def head_logits(kind: str, head: dict[str, Tensor], cls: Tensor,
                patches: Tensor) -> Tensor:
    if kind == "linear":
        return T.add(T.matmul(cls, head["fc.weight"]), head["fc.bias"])
    x = T.add(T.matmul(patches, head["proj.weight"]), head["proj.bias"])
    b = x.shape[0]
    ones_b = Tensor(np.ones((b, 1, 1), dtype=np.float32))
    x = T.concat([T.mul(ones_b, head["cls_token"]), x], axis=1)
    i = 0
    while f"blocks.{i}.norm1.gain" in head:
        x, _ = transformer_block(x, head, f"blocks.{i}.", num_heads=4)
        i += 1
    x = T.layer_norm(x, head["norm.gain"], head["norm.bias"])
    return T.add(T.matmul(x[:, 0, :], head["fc.weight"]), head["fc.bias"])


# -- training -----------------------------------------------------------------


@dataclass
class FinetuneResult:
    encoder_params: dict[str, Tensor]
    head_params: dict[str, Tensor]
    head_kind: str
    report: MetricsReport
    label_names: list[str]


def _cosine_lr(step: int, total: int, peak: float) -> float:
    if total <= 1:
        return peak
    floor = peak / 100.0
    frac = step / (total - 1)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


def _usable_labels(train_records, val_records) -> list[str]:
    names = sorted({k for r in train_records for k in r.labels})
    usable = []
    for name in names:
        tr = any(r.labels.get(name) for r in train_records)
        va = any(r.labels.get(name) for r in val_records)
        if tr or va:
            usable.append(name)
        else:
            warnings.warn(f"label {name!r} absent from both splits; skipped")
    return usable


def score_records(encoder: ViTEncoder, head: dict[str, Tensor], head_kind: str,
                  records, manifest_dir, label_names,
                  batch_size: int = 64) -> np.ndarray:
    """Validation-path logits (no augmentation, inference mode)."""
    size = encoder.cfg.image_size_global
    scores = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        imgs = np.stack([
            resize_bilinear(load_image(r, manifest_dir).astype(np.float64),
                            size, size)
            for r in chunk
        ])
        with T.no_grad():
            cls, patches, _ = encoder.forward_batch(imgs, training=False)
            logits = head_logits(head_kind, head, cls, patches)
        scores.append(logits.data.copy())
    return np.concatenate(scores, axis=0)


def evaluate_scores(scores: np.ndarray, records, label_names) -> MetricsReport:
    """Per-label AP and ROC-AUC; undefined metrics reported as absent."""
    report = MetricsReport()
    ids = [r.image_id for r in records]
    for j, name in enumerate(label_names):
        y = np.asarray([bool(r.labels.get(name, False)) for r in records])
        support = int(y.sum())
        try:
            auc = roc_auc(scores[:, j], y)
        except MetricUndefinedError:
            auc = None
        try:
            ap = average_precision(scores[:, j], y, ids=ids)
        except MetricUndefinedError:
            ap = None
        report.add(name, "roc_auc", auc, support)
        report.add(name, "average_precision", ap, support)
    return report


def finetune(ckpt: Checkpoint, train_records: list[ManifestRecord],
             val_records: list[ManifestRecord], manifest_dir,
             config: RunConfig | None = None,
             seed: int | None = None) -> FinetuneResult:
    """Fine-tune the pretrained student encoder end to end with BCE.

    The checkpoint object is never mutated; steps=0 returns the encoder
    weights bit-identical to the checkpoint.
    """
    encoder, _, ckpt_config = encoder_from_checkpoint(ckpt, "student")
    config = config or ckpt_config
    ft: FinetuneConfig = config.finetune
    ft.validate()
    seed = config.seed if seed is None else seed
    if not train_records:
        raise DataError("finetune needs a non-empty training manifest")
    label_names = _usable_labels(train_records, val_records)
    if not label_names:
        raise DataError("no usable labels for finetuning")

    rng_init = rng_from(seed, TAG_FINETUNE, 0xE0)
    head = init_head(ft.head, config.model.embed_dim, len(label_names), rng_init)

    params = {f"encoder.{k}": v for k, v in encoder.params.items()}
    params.update({f"head.{k}": v for k, v in head.items()})
    for p in params.values():
        p.requires_grad = True
    optim = AdamW(params, OptimConfig(weight_decay=ft.weight_decay,
                                      clip_grad_norm=3.0))

    size = config.model.image_size_global
    images = {r.image_id: load_image(r, manifest_dir) for r in train_records}
    y_all = {
        r.image_id: np.asarray(
            [bool(r.labels.get(n, False)) for n in label_names], dtype=np.float32
        )
        for r in train_records
    }

    for step in range(ft.steps):
        rng_pick = rng_from(seed, TAG_FINETUNE, step)
        picks = rng_pick.integers(0, len(train_records), size=ft.batch_size)
        batch_imgs, batch_y = [], []
        for slot, pick in enumerate(picks):
            rec = train_records[int(pick)]
            rng = rng_from(seed, TAG_FINETUNE, step, slot)
            img = images[rec.image_id].astype(np.float64)
            if ft.augment:
                img = augment_finetune(img, size, rng)
            else:
                img = resize_bilinear(img, size, size)
            batch_imgs.append(img)
            batch_y.append(y_all[rec.image_id])
        x = np.stack(batch_imgs)
        y = np.stack(batch_y)
        rng_dp = rng_from(seed, TAG_FINETUNE, step, 0xD0)
        cls, patches, _ = encoder.forward_batch(x, training=True, rng=rng_dp)
        logits = head_logits(ft.head, head, cls, patches)
        loss = T.tmean(T.bce_with_logits(logits, y))
        for p in params.values():
            p.grad = None
        T.backward(loss)
        optim.clip_gradients()
        optim.step(_cosine_lr(step, ft.steps, ft.lr))

    if val_records:
        scores = score_records(encoder, head, ft.head, val_records,
                               manifest_dir, label_names)
        report = evaluate_scores(scores, val_records, label_names)
    else:
        report = MetricsReport()
    return FinetuneResult(encoder_params=encoder.params, head_params=head,
                          head_kind=ft.head, report=report,
                          label_names=label_names)
