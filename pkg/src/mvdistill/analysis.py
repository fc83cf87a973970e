"""Analysis protocols: final-block attention maps, cross-view patch
cosine similarity around an anchor patch, and paired-view retrieval@1."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .ingest import write_pgm
from .vit import ViTEncoder


@dataclass
class AttentionMapSet:
    grids: np.ndarray   # (num_heads, g, g) CLS->patch attention
    cls_to_cls: np.ndarray  # (num_heads,)
    image_id: str = ""


@dataclass
class SimilarityResult:
    anchor: tuple[int, int]
    anchor_image_id: str
    comparison_image_id: str
    ranking: list[tuple[int, float]]  # (patch index, cosine) descending
    top_k: list[tuple[int, float]]

    @property
    def top_k_mean(self) -> float:
        return float(np.mean([c for _, c in self.top_k]))


def attention_maps(encoder: ViTEncoder, image: np.ndarray,
                   image_id: str = "") -> AttentionMapSet:
    """Per-head CLS-query attention over patch positions, as a patch grid."""
    out = encoder.encode([image])[0]
    attn = out.final_attention  # (heads, T, T)
    cls_row = attn[:, 0, :]
    cls_to_cls = cls_row[:, 0].copy()
    patch_mass = cls_row[:, 1:]
    g = int(round(np.sqrt(patch_mass.shape[1])))
    if g * g != patch_mass.shape[1]:
        raise DataError("non-square patch grid in attention map")
    return AttentionMapSet(
        grids=patch_mass.reshape(-1, g, g).copy(),
        cls_to_cls=cls_to_cls,
        image_id=image_id,
    )


def save_attention_maps(maps: AttentionMapSet, out_dir, stem: str = "attn"):
    """One min-max normalized PGM per head plus the raw values as CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for h, grid in enumerate(maps.grids):
        lo, hi = float(grid.min()), float(grid.max())
        if hi - lo < 1e-12:
            img = np.zeros_like(grid)
        else:
            img = (grid - lo) / (hi - lo)
        pgm = np.rint(img * 255.0).astype(np.uint8)
        path = out_dir / f"{stem}-head{h}.pgm"
        write_pgm(pgm, path)
        paths.append(path)
    csv_path = out_dir / f"{stem}-raw.csv"
    with csv_path.open("w", encoding="ascii") as fh:
        fh.write("head,row,col,weight\n")
        for h, grid in enumerate(maps.grids):
            for r in range(grid.shape[0]):
                for c in range(grid.shape[1]):
                    fh.write(f"{h},{r},{c},{grid[r, c]!r}\n")
    return paths + [csv_path]


def patch_similarity(encoder: ViTEncoder, image_a: np.ndarray,
                     anchor_rc: tuple[int, int], image_b: np.ndarray,
                     top_k: int = 5, image_id_a: str = "a",
                     image_id_b: str = "b") -> SimilarityResult:
    """Cosine similarity between one anchor patch embedding of image_a and
    every patch embedding of image_b (final-block output, post-norm)."""
    out_a, out_b = encoder.encode([image_a, image_b])
    n_a = out_a.patch_embeddings.shape[0]
    g_a = int(round(np.sqrt(n_a)))
    row, col = anchor_rc
    if not (0 <= row < g_a and 0 <= col < g_a):
        raise UsageError(
            f"anchor ({row},{col}) outside the {g_a}x{g_a} patch grid"
        )
    anchor_vec = out_a.patch_embeddings[row * g_a + col].astype(np.float64)
    others = out_b.patch_embeddings.astype(np.float64)
    denom = np.linalg.norm(anchor_vec) * np.linalg.norm(others, axis=1)
    cos = (others @ anchor_vec) / np.maximum(denom, 1e-12)
    order = np.lexsort((np.arange(len(cos)), -cos))
    ranking = [(int(i), float(cos[i])) for i in order]
    kk = min(top_k, len(ranking))
    return SimilarityResult(
        anchor=(row, col), anchor_image_id=image_id_a,
        comparison_image_id=image_id_b,
        ranking=ranking, top_k=ranking[:kk],
    )


def save_similarity(result: SimilarityResult, path) -> None:
    payload = {
        "anchor": {"row": result.anchor[0], "col": result.anchor[1],
                   "image_id": result.anchor_image_id},
        "comparison_image_id": result.comparison_image_id,
        "top_k": [{"patch": i, "cosine": c} for i, c in result.top_k],
        "top_k_mean": result.top_k_mean,
        "ranking": [{"patch": i, "cosine": c} for i, c in result.ranking],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="ascii")


def cross_view_retrieval(emb_a: np.ndarray, emb_b: np.ndarray,
                         min_pairs: int = 10) -> float:
    """retrieval@1: fraction of view-A rows whose nearest (cosine) view-B
    row is the same study.  Rows of emb_a and emb_b are paired by index;
    similarity ties resolve to the smallest index."""
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("cross_view_retrieval needs equal paired matrices")
    n = a.shape[0]
    if n < min_pairs:
        raise DataError(f"cross_view_retrieval needs >= {min_pairs} pairs")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sims = an @ bn.T
    hits = 0
    for i in range(n):
        row = sims[i]
        best = row.max()
        match = int(np.flatnonzero(row == best)[0])
        hits += match == i
    return hits / n
