"""View sampling and the 12-crop multi-view batch builder.

Geometry defaults: global crops cover 25-100% of the image area, local
crops 5-25%, aspect jittered in [3/4, 4/3] then clamped to fit, bilinear
resize, horizontal flip with one coin per source image before cropping.
Everything is a pure function of (inputs, rng): per-sample generators make
the pipeline independent of worker count and call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParameterError
from .imageops import hflip, resize_bilinear

ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class CropSpec:
    area_range: tuple[float, float]
    output_size: int
    count_per_view: int

    def validate(self, name: str = "crop") -> None:
        lo, hi = self.area_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError(f"{name}.area_range must satisfy 0 < lo <= hi <= 1")
        if self.output_size < 1:
            raise ConfigError(f"{name}.output_size must be >= 1")
        if self.count_per_view < 0:
            raise ConfigError(f"{name}.count_per_view must be >= 0")


@dataclass(frozen=True)
class AugmentConfig:
    global_crop: CropSpec = CropSpec((0.25, 1.0), 64, 1)
    local_crop: CropSpec = CropSpec((0.05, 0.25), 32, 5)
    flip_prob: float = 0.1

    def validate(self) -> None:
        self.global_crop.validate("augment.global_crop")
        self.local_crop.validate("augment.local_crop")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("augment.flip_prob must be in [0, 1]")


@dataclass
class Crop:
    image: np.ndarray
    source_view_id: str
    kind: str  # "global" | "local"


@dataclass
class CropBatch:
    crops: list[Crop]
    teacher_indices: list[int] = field(default_factory=list)

    @property
    def globals_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.crops) if c.kind == "global"]


def select_views(study, rng: np.random.Generator, mode: str = "multi"):
    """Pick the two source views: distinct in multi mode, repeated in single."""
    views = study.views
    if mode == "single":
        idx = int(rng.integers(0, len(views)))
        return views[idx], views[idx]
    if mode != "multi":
        raise ParameterError(f"unknown view mode {mode!r}")
    if len(views) < 2:
        raise DataError(
            f"study {study.study_id} has {len(views)} view(s); "
            "multi mode needs >= 2 (filter such studies at ingestion)"
        )
    i, j = rng.choice(len(views), size=2, replace=False)
    return views[int(i)], views[int(j)]


def crop_geometry(h: int, w: int, spec: CropSpec, rng) -> tuple[int, int, int, int]:
    """(top, left, crop_h, crop_w) with integer area fraction kept in range."""
    lo, hi = spec.area_range
    frac = rng.uniform(lo, hi)
    aspect = math.exp(rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])))
    area = frac * h * w
    ch = math.sqrt(area / aspect)
    cw = math.sqrt(area * aspect)
    if ch > h:
        ch, cw = float(h), area / h
    elif cw > w:
        cw, ch = float(w), area / w

    def clampi(v, top):
        return max(1, min(int(round(v)), top))

    ih, iw = clampi(ch, h), clampi(cw, w)
    # integer rounding may push the realized fraction out of range
    if ih * iw < lo * h * w:
        ih = clampi(math.ceil(ch), h)
        iw = clampi(math.ceil(cw), w)
    elif ih * iw > hi * h * w:
        ih = clampi(math.floor(ch), h)
        iw = clampi(math.floor(cw), w)
    top = int(rng.integers(0, h - ih + 1))
    left = int(rng.integers(0, w - iw + 1))
    return top, left, ih, iw


def sample_crop(image: np.ndarray, spec: CropSpec, rng) -> np.ndarray:
    """Random area/aspect crop resized to spec.output_size (bilinear)."""
    h, w = image.shape
    if min(h, w) < 2:
        raise DataError(f"degenerate image {h}x{w}: too small to crop")
    top, left, ch, cw = crop_geometry(h, w, spec, rng)
    patch = image[top : top + ch, left : left + cw]
    return resize_bilinear(patch, spec.output_size, spec.output_size)


def horizontal_flip(image: np.ndarray, p: float, rng) -> np.ndarray:
    """Mirror across the vertical axis with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return hflip(image)
    return np.array(image, copy=True)


def build_multicrop(view_a, view_b, cfg: AugmentConfig, rng,
                    teacher_views: str = "one_view_globals") -> CropBatch:
    """Crop both (already flipped) views into the multi-crop batch.

    Layout: [global A, global B, locals A..., locals B...] with
    count_per_view of each kind per view.  teacher_indices are the global
    crops of one uniformly chosen view (`one_view_globals`) or all globals
    (`all_globals`).
    """
    cfg.validate()
    pairs = ((view_a.image_id, np.asarray(view_a.image, dtype=np.float64)),
             (view_b.image_id, np.asarray(view_b.image, dtype=np.float64)))
    crops: list[Crop] = []
    for vid, img in pairs:
        for _ in range(cfg.global_crop.count_per_view):
            crops.append(Crop(sample_crop(img, cfg.global_crop, rng), vid, "global"))
    for vid, img in pairs:
        for _ in range(cfg.local_crop.count_per_view):
            crops.append(Crop(sample_crop(img, cfg.local_crop, rng), vid, "local"))

    batch = CropBatch(crops=crops)
    globals_idx = batch.globals_indices
    if teacher_views == "all_globals":
        batch.teacher_indices = list(globals_idx)
    elif teacher_views == "one_view_globals":
        chosen = pairs[int(rng.integers(0, 2))][0]
        batch.teacher_indices = [
            i for i in globals_idx if crops[i].source_view_id == chosen
        ]
    else:
        raise ConfigError(f"unknown teacher_views policy {teacher_views!r}")
    if not batch.teacher_indices:
        raise ConfigError("teacher receives zero crops under this configuration")
    return batch


def sample_crop_batch(study, cfg: AugmentConfig, rng, mode: str = "multi",
                      teacher_views: str = "one_view_globals") -> CropBatch:
    """Full per-sample pipeline: select views, flip per image, multi-crop."""
    view_a, view_b = select_views(study, rng, mode)
    flipped: dict[str, np.ndarray] = {}
    for view in (view_a, view_b):
        if view.image_id not in flipped:
            flipped[view.image_id] = horizontal_flip(
                np.asarray(view.image, dtype=np.float64), cfg.flip_prob, rng
            )

    class _V:
        __slots__ = ("image_id", "image")

        def __init__(self, image_id, image):
            self.image_id = image_id
            self.image = image

    fa = _V(view_a.image_id, flipped[view_a.image_id])
    fb = _V(view_b.image_id, flipped[view_b.image_id])
    return build_multicrop(fa, fb, cfg, rng, teacher_views)
