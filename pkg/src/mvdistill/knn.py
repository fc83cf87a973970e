"""k-NN over frozen embeddings: per-label majority vote, deterministic
tie-breaks, and the 5-fold grid search for k."""

from __future__ import annotations

import warnings

import numpy as np

from .embed import EmbeddingMatrix
from .errors import UsageError
from .metrics import f1_precision_recall

DISTANCES = ("cosine", "euclidean")


def _distance_matrix(train_rows, query_rows, distance: str) -> np.ndarray:
    a = np.asarray(query_rows, dtype=np.float64)
    b = np.asarray(train_rows, dtype=np.float64)
    if distance == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
        return 1.0 - an @ bn.T
    if distance == "euclidean":
        aa = np.sum(a * a, axis=1, keepdims=True)
        bb = np.sum(b * b, axis=1, keepdims=True)
        sq = np.maximum(aa + bb.T - 2.0 * (a @ b.T), 0.0)
        return np.sqrt(sq)
    raise UsageError(f"distance must be one of {DISTANCES}")


def _neighbor_indices(dist_row, id_rank, k: int) -> np.ndarray:
    """k smallest distances; exact distance ties broken by smaller id."""
    order = np.lexsort((id_rank, dist_row))
    return order[:k]


def knn_predict(train: EmbeddingMatrix, train_labels: np.ndarray,
                query_rows: np.ndarray, k: int,
                distance: str = "cosine") -> np.ndarray:
    """(Q, L) boolean predictions: label positive iff > k/2 of the k
    nearest training rows are positive (even-split ties predict negative)."""
    if train.rows.shape[0] == 0:
        raise UsageError("knn_predict needs a non-empty training set")
    if not 1 <= k <= train.rows.shape[0]:
        raise UsageError(f"k={k} outside [1, {train.rows.shape[0]}]")
    labels = np.asarray(train_labels, dtype=bool)
    if labels.ndim == 1:
        labels = labels[:, None]
    dist = _distance_matrix(train.rows, query_rows, distance)
    id_rank = np.argsort(np.argsort(np.asarray(train.ids, dtype=object),
                                    kind="stable"))
    preds = np.zeros((dist.shape[0], labels.shape[1]), dtype=bool)
    for qi in range(dist.shape[0]):
        nbrs = _neighbor_indices(dist[qi], id_rank, k)
        votes = labels[nbrs].sum(axis=0)
        preds[qi] = votes > k / 2.0
    return preds


def label_matrix(emb: EmbeddingMatrix, label_names) -> np.ndarray:
    return np.asarray(
        [[bool(l.get(name, False)) for name in label_names] for l in emb.labels],
        dtype=bool,
    )


def _stratified_study_folds(emb: EmbeddingMatrix, label_names, folds: int):
    """Deterministic study-level folds, label patterns spread round-robin."""
    by_study: dict[str, list[int]] = {}
    for i, sid in enumerate(emb.study_ids):
        by_study.setdefault(sid, []).append(i)
    keyed = sorted(
        by_study.items(),
        key=lambda kv: (
            tuple(bool(emb.labels[kv[1][0]].get(n, False)) for n in label_names),
            kv[0],
        ),
    )
    assignments: list[list[int]] = [[] for _ in range(folds)]
    for pos, (_, idxs) in enumerate(keyed):
        assignments[pos % folds].extend(idxs)
    return assignments


def _subset(emb: EmbeddingMatrix, idxs) -> EmbeddingMatrix:
    idxs = list(idxs)
    return EmbeddingMatrix(
        rows=emb.rows[idxs],
        ids=[emb.ids[i] for i in idxs],
        study_ids=[emb.study_ids[i] for i in idxs],
        labels=[emb.labels[i] for i in idxs],
        source=dict(emb.source),
    )


def grid_search_k(train: EmbeddingMatrix, label_names, candidates,
                  folds: int = 5, distance: str = "cosine") -> int:
    """5-fold (study-stratified) CV over k candidates maximizing mean
    macro-F1; ties go to the smallest k.  Result is independent of the
    candidate order."""
    candidates = sorted(set(int(k) for k in candidates))
    if not candidates:
        raise UsageError("grid_search_k needs at least one candidate")
    if folds < 2:
        raise UsageError("grid_search_k needs folds >= 2")
    if len(candidates) == 1:
        return candidates[0]
    fold_idxs = _stratified_study_folds(train, label_names, folds)
    scores = {k: [] for k in candidates}
    for fold in range(folds):
        val_idx = fold_idxs[fold]
        train_idx = [i for f in range(folds) if f != fold for i in fold_idxs[f]]
        if not val_idx or not train_idx:
            continue
        tr = _subset(train, train_idx)
        va = _subset(train, val_idx)
        tr_labels = label_matrix(tr, label_names)
        va_labels = label_matrix(va, label_names)
        usable = [
            j for j in range(len(label_names))
            if va_labels[:, j].any() and tr_labels[:, j].any()
        ]
        if not usable:
            warnings.warn(f"grid_search_k: fold {fold} has zero positives "
                          "for all labels; skipped")
            continue
        for k in candidates:
            kk = min(k, tr.rows.shape[0])
            preds = knn_predict(tr, tr_labels, va.rows, kk, distance)
            f1s = [f1_precision_recall(preds[:, j], va_labels[:, j])[0]
                   for j in usable]
            scores[k].append(float(np.mean(f1s)))
    means = {k: (float(np.mean(v)) if v else 0.0) for k, v in scores.items()}
    best = max(candidates, key=lambda k: (means[k], -k))
    return best
