"""Dataset ingestion: PGM image files, JSONL manifests, exact dedup,
low-information filtering and leak-free study-level splits."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .seeding import TAG_SPLIT, rng_from
from .synthetic import Study, View

DEFAULT_ENTROPY_MIN_BITS = 1.5
DEFAULT_MODE_FRACTION_MAX = 0.98


# -- PGM (binary P5, 8-bit, single channel) ------------------------------------


def write_pgm(image: np.ndarray, path) -> bytes:
    """Write an (H, W) uint8 image as binary PGM; returns the file bytes."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DataError("write_pgm expects a 2-D uint8 image")
    h, w = img.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes(order="C")
    Path(path).write_bytes(payload)
    return payload


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval -- whitespace separated, # comments
    fields: list[int] = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        try:
            fields.append(int(raw[i:j]))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PGM header") from exc
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval 255)")
    data = raw[i : i + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# -- manifests -------------------------------------------------------------------


@dataclass
class ManifestRecord:
    study_id: str
    image_id: str
    projection: str
    path: str  # relative to the manifest file's directory
    width: int
    height: int
    sha256: str
    labels: dict[str, bool]


def save_study(study: Study, images_dir, rel_prefix: str = "images") -> list[ManifestRecord]:
    """Write each view as PGM under images_dir; returns manifest records."""
    images_dir = Path(images_dir)
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for view in study.views:
        fname = f"{view.image_id}.pgm"
        payload = write_pgm(view.image, images_dir / fname)
        digest = hashlib.sha256(payload).hexdigest()
        view.sha256 = digest
        records.append(ManifestRecord(
            study_id=study.study_id,
            image_id=view.image_id,
            projection=view.projection,
            path=f"{rel_prefix}/{fname}",
            width=int(view.image.shape[1]),
            height=int(view.image.shape[0]),
            sha256=digest,
            labels=dict(study.labels),
        ))
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    with path.open("w", encoding="ascii") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except OSError as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(ManifestRecord(**obj))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}:{n}: bad manifest record: {exc}") from exc
    return records


def load_image(record: ManifestRecord, manifest_dir) -> np.ndarray:
    return read_pgm(Path(manifest_dir) / record.path)


def verify_record(record: ManifestRecord, manifest_dir) -> None:
    p = Path(manifest_dir) / record.path
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise DataError(f"unreadable image file {p}: {exc}") from exc
    digest = hashlib.sha256(raw).hexdigest()
    if digest != record.sha256:
        raise DataError(f"sha256 mismatch for {p}")


def group_by_study(records) -> dict[str, list[ManifestRecord]]:
    studies: dict[str, list[ManifestRecord]] = {}
    for rec in records:
        studies.setdefault(rec.study_id, []).append(rec)
    return studies


def load_studies(records, manifest_dir) -> list[Study]:
    """Materialize Study objects (images in memory) from manifest records."""
    studies = []
    for sid, recs in group_by_study(records).items():
        views = [
            View(image_id=r.image_id, projection=r.projection,
                 image=load_image(r, manifest_dir), sha256=r.sha256)
            for r in recs
        ]
        studies.append(Study(study_id=sid, views=views, labels=dict(recs[0].labels)))
    return studies


# -- cleaning -------------------------------------------------------------------


def dedup(records) -> tuple[list[ManifestRecord], list[tuple[str, str, str]]]:
    """Drop exact duplicates (same sha256), keeping the first occurrence.

    Returns (kept records, report rows (image_id, action, reason)).
    """
    seen: dict[str, str] = {}
    kept, report = [], []
    for rec in records:
        first = seen.get(rec.sha256)
        if first is None:
            seen[rec.sha256] = rec.image_id
            kept.append(rec)
            report.append((rec.image_id, "keep", ""))
        else:
            report.append((rec.image_id, "drop", f"duplicate_of:{first}"))
    return kept, report


def low_info_filter(image: np.ndarray,
                    entropy_min_bits: float = DEFAULT_ENTROPY_MIN_BITS,
                    mode_fraction_max: float = DEFAULT_MODE_FRACTION_MAX):
    """(keep, reason): drop nearly-blank images by histogram entropy or a
    dominant modal value."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise DataError("low_info_filter expects an 8-bit grayscale image")
    hist = np.bincount(img.reshape(-1), minlength=256).astype(np.float64)
    p = hist / img.size
    nz = p[p > 0]
    entropy_bits = float(-(nz * np.log2(nz)).sum()) + 0.0  # normalize -0.0
    if entropy_bits < entropy_min_bits:
        return False, f"entropy:{entropy_bits:.3f}<{entropy_min_bits}"
    mode_frac = float(p.max())
    if mode_frac > mode_fraction_max:
        return False, f"mode_fraction:{mode_frac:.3f}>{mode_fraction_max}"
    return True, ""


def apply_low_info_filter(records, manifest_dir,
                          entropy_min_bits: float = DEFAULT_ENTROPY_MIN_BITS,
                          mode_fraction_max: float = DEFAULT_MODE_FRACTION_MAX):
    kept, report = [], []
    for rec in records:
        keep, reason = low_info_filter(load_image(rec, manifest_dir),
                                       entropy_min_bits, mode_fraction_max)
        if keep:
            kept.append(rec)
            report.append((rec.image_id, "keep", ""))
        else:
            report.append((rec.image_id, "drop", reason))
    return kept, report


def write_report(rows, path) -> None:
    with Path(path).open("w", encoding="ascii") as fh:
        fh.write("image_id,action,reason\n")
        for image_id, action, reason in rows:
            fh.write(f"{image_id},{action},{reason}\n")


# -- splits ----------------------------------------------------------------------


def _label_rates(records) -> dict[str, float]:
    if not records:
        return {}
    names = sorted({k for r in records for k in r.labels})
    return {
        name: sum(bool(r.labels.get(name)) for r in records) / len(records)
        for name in names
    }


def _balanced(train, val, tolerance: float) -> bool:
    tr, va = _label_rates(train), _label_rates(val)
    for name in tr:
        a, b = tr[name], va.get(name, 0.0)
        if max(a, b) == 0.0:
            continue
        if abs(a - b) / max(a, b) >= tolerance:
            return False
    return True


def split_by_study(records, val_fraction: float, seed: int,
                   balance_tolerance: float = 0.2, max_redraws: int = 100):
    """Assign whole studies to train/val; re-draw until per-label positive
    rates agree within `balance_tolerance` relative (else warn)."""
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError("val_fraction must be in (0, 1)")
    studies = sorted(group_by_study(records))
    if len(studies) < 2:
        raise DataError("split_by_study needs at least 2 studies")
    by_study = group_by_study(records)
    n_val = int(round(val_fraction * len(studies)))
    n_val = min(max(n_val, 1), len(studies) - 1)

    last = None
    for attempt in range(max_redraws):
        rng = rng_from(seed, TAG_SPLIT, attempt)
        order = list(studies)
        rng.shuffle(order)
        val_ids = set(order[:n_val])
        train = [r for sid in order[n_val:] for r in by_study[sid]]
        val = [r for sid in sorted(val_ids) for r in by_study[sid]]
        last = (train, val)
        if _balanced(train, val, balance_tolerance):
            return last
    warnings.warn(
        f"split_by_study: no balanced split within {max_redraws} redraws; "
        "returning the last draw"
    )
    return last
