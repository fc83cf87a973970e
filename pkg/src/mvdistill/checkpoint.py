"""Bit-exact checkpoints: raw little-endian tensors + one JSON meta file.

Layout: <dir>/meta.json plus one .bin per tensor (row-major, named by the
hierarchical parameter path).  load(save(x)) round-trips bit-identically;
any size/version mismatch fails naming the offending file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    step: int
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(out_dir, step: int, config: dict,
                    tensors: dict[str, np.ndarray],
                    extra_meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            arr = arr.astype(np.float32)
            dtype = "float32"
        fname = name + ".bin"
        (out_dir / fname).write_bytes(arr.astype(_DTYPES[dtype]).tobytes("C"))
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    meta = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config,
        "tensors": index,
    }
    if extra_meta:
        meta.update(extra_meta)
    (out_dir / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="ascii"
    )


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.json"
    if not meta_path.is_file():
        raise FormatError(f"missing checkpoint meta file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="ascii"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint meta {meta_path}: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{meta_path}: format_version {version} != supported {FORMAT_VERSION}"
        )
    tensors = {}
    for name, entry in meta["tensors"].items():
        path = ckpt_dir / entry["file"]
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * int(_DTYPES[dtype][-1])
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise FormatError(f"missing tensor file {path}") from exc
        if len(raw) != expected:
            raise FormatError(
                f"{path}: size {len(raw)} != expected {expected} bytes"
            )
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(dtype, copy=True)
    return Checkpoint(step=int(meta["step"]), config=meta.get("config", {}),
                      tensors=tensors, meta=meta)
