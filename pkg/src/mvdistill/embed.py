"""Frozen-encoder embedding extraction and the embedding file format
(raw float32 rows + JSON sidecar)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import config_from_dict
from .errors import DataError, FormatError, UsageError
from .imageops import resize_bilinear
from .ingest import ManifestRecord, load_image
from .tensor import Tensor
from .vit import ViTConfig, ViTEncoder

POOLINGS = ("cls", "mean_patch")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray              # (N, dim) float32
    ids: list[str]
    study_ids: list[str]
    labels: list[dict[str, bool]]
    source: dict = field(default_factory=dict)  # checkpoint hash, pooling...

    def validate(self) -> "EmbeddingMatrix":
        if len(self.ids) != self.rows.shape[0]:
            raise DataError("embedding row count != id count")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate image ids in embedding matrix")
        if not np.all(np.isfinite(self.rows)):
            raise DataError("non-finite embedding rows")
        return self


def encoder_from_checkpoint(ckpt: Checkpoint, which: str = "student"):
    """Rebuild a frozen encoder (and head params) from checkpoint tensors."""
    if which not in ("student", "teacher"):
        raise UsageError("which must be student or teacher")
    config = config_from_dict(ckpt.config)
    prefix = f"{which}.encoder."
    enc_params = {
        k[len(prefix):]: Tensor(v.astype(np.float32))
        for k, v in ckpt.tensors.items() if k.startswith(prefix)
    }
    if not enc_params:
        raise FormatError(f"checkpoint has no {which} encoder tensors")
    head_prefix = f"{which}.head."
    head_params = {
        k[len(head_prefix):]: Tensor(v.astype(np.float32))
        for k, v in ckpt.tensors.items() if k.startswith(head_prefix)
    }
    return ViTEncoder(config.model, params=enc_params), head_params, config


def _prepare_image(img: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    side = cfg.image_size_global
    if img.shape == (side, side):
        return np.asarray(img, dtype=np.float64)
    return resize_bilinear(np.asarray(img, dtype=np.float64), side, side)


def extract_embeddings(encoder: ViTEncoder, records: list[ManifestRecord],
                       manifest_dir, pooling: str = "cls",
                       source: dict | None = None,
                       batch_size: int = 64) -> EmbeddingMatrix:
    """Inference-mode CLS (or mean-patch) embeddings for every manifest row."""
    if pooling not in POOLINGS:
        raise UsageError(f"pooling must be one of {POOLINGS}")
    rows, ids, study_ids, labels = [], [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = [_prepare_image(load_image(r, manifest_dir), encoder.cfg)
                  for r in chunk]
        outs = encoder.encode(images, training=False)
        for rec, out in zip(chunk, outs):
            if pooling == "cls":
                rows.append(out.cls_embedding)
            else:
                rows.append(out.patch_embeddings.mean(axis=0))
            ids.append(rec.image_id)
            study_ids.append(rec.study_id)
            labels.append(dict(rec.labels))
    matrix = np.asarray(rows, dtype=np.float32)
    return EmbeddingMatrix(rows=matrix, ids=ids, study_ids=study_ids,
                           labels=labels,
                           source=dict(source or {}, pooling=pooling)).validate()


def save_embeddings(emb: EmbeddingMatrix, out_path) -> None:
    """<out>.bin (row-major float32) + <out>.json sidecar."""
    out_path = Path(out_path)
    out_path.with_suffix(".bin").write_bytes(
        emb.rows.astype("<f4").tobytes("C")
    )
    sidecar = {
        "count": len(emb.ids),
        "dim": int(emb.rows.shape[1]),
        "ids": emb.ids,
        "study_ids": emb.study_ids,
        "labels": emb.labels,
        "pooling": emb.source.get("pooling", "cls"),
        "checkpoint_hash": emb.source.get("checkpoint_hash", ""),
    }
    out_path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="ascii"
    )


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".bin")
    try:
        sidecar = json.loads(sidecar_path.read_text(encoding="ascii"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad embeddings sidecar {sidecar_path}: {exc}") from exc
    raw = bin_path.read_bytes()
    n, d = sidecar["count"], sidecar["dim"]
    if len(raw) != n * d * 4:
        raise FormatError(f"{bin_path}: size {len(raw)} != {n}x{d} float32")
    rows = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
    return EmbeddingMatrix(
        rows=rows, ids=list(sidecar["ids"]), study_ids=list(sidecar["study_ids"]),
        labels=[dict(l) for l in sidecar["labels"]],
        source={"pooling": sidecar.get("pooling", "cls"),
                "checkpoint_hash": sidecar.get("checkpoint_hash", "")},
    ).validate()
