"""Deterministic multi-view study generator.

A Scene is a handful of density primitives in the unit cube: a curved
"spine" chain of dense links, a soft-tissue body ellipsoid, a few organ
ellipsoids, and optionally a small very dense "foreign body" sphere and a
diffuse "effusion" blob (the planted findings).  Views are parallel-beam
attenuation projections along two orthogonal axes with small per-view
rotation/translation jitter: pixel = rint(255 * exp(-mu * integral of
density along the ray)), chord lengths computed analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import rng_from

LABELS = ("foreign_body", "effusion")

AXIS_LATERAL = np.array([0.0, 1.0, 0.0])
AXIS_VENTRODORSAL = np.array([0.0, 0.0, 1.0])
_PROJECTIONS = (("lateral", AXIS_LATERAL), ("ventrodorsal", AXIS_VENTRODORSAL))

_FOV = 1.25  # image plane side length in scene units
_CENTER = np.array([0.5, 0.5, 0.5])


@dataclass
class Primitive:
    shape: str  # "ellipsoid" | "box" | "chain"
    center: np.ndarray
    radii: np.ndarray  # ellipsoid radii / box half-extents / link radii
    density: float
    links: np.ndarray | None = None  # (n, 3) link centers for chains


@dataclass
class Scene:
    primitives: list[Primitive]
    anomaly_flags: dict[str, bool] = field(default_factory=dict)


@dataclass
class View:
    image_id: str
    projection: str
    image: np.ndarray  # (S, S) uint8
    sha256: str = ""


@dataclass
class Study:
    study_id: str
    views: list[View]
    labels: dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    num_views: int = 2
    organ_count_range: tuple[int, int] = (2, 5)
    foreign_body_rate: float = 0.5
    effusion_rate: float = 0.3
    jitter_deg: float = 10.0
    jitter_translation: float = 0.04
    attenuation: float = 3.1

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigError("data.image_size must be >= 32")
        if self.num_views < 1:
            raise ConfigError("data.num_views must be >= 1")
        lo, hi = self.organ_count_range
        if not (1 <= lo <= hi):
            raise ConfigError("data.organ_count_range must satisfy 1 <= lo <= hi")
        for name in ("foreign_body_rate", "effusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"data.{name} must be in [0, 1]")
        if not 0.0 <= self.jitter_deg <= 10.0:
            raise ConfigError("data.jitter_deg must be in [0, 10] degrees")
        if self.attenuation <= 0:
            raise ConfigError("data.attenuation must be > 0")


# -- chord-length integrals ----------------------------------------------------


def _ellipsoid_chords(origins, direction, center, radii):
    """Chord length of each ray through one ellipsoid (vectorized)."""
    op = (origins - center) / radii
    dp = direction / radii
    a = float(np.dot(dp, dp))
    b = 2.0 * (op @ dp)
    c = np.sum(op * op, axis=1) - 1.0
    disc = b * b - 4.0 * a * c
    return np.sqrt(np.maximum(disc, 0.0)) / a


def _box_chords(origins, direction, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # along axes where the ray is parallel, inclusion decides: +/-inf slabs
    para = np.abs(direction) < 1e-12
    if np.any(para):
        inside = (origins >= lo) & (origins <= hi)
        t1 = np.where(para, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(para, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    return np.maximum(tmax - tmin, 0.0)


def primitive_chords(origins, direction, prim: Primitive):
    if prim.shape == "ellipsoid":
        return _ellipsoid_chords(origins, direction, prim.center, prim.radii)
    if prim.shape == "box":
        return _box_chords(origins, direction, prim.center, prim.radii)
    if prim.shape == "chain":
        total = np.zeros(origins.shape[0])
        for link in prim.links:
            total += _ellipsoid_chords(origins, direction, link, prim.radii)
        return total
    raise ConfigError(f"unknown primitive shape {prim.shape!r}")


def _rotation(deg: np.ndarray) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _frame(axis: np.ndarray):
    """Right-handed orthonormal (u, v) spanning the image plane of `axis`."""
    d = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(d, helper)) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, d)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return u, v


def render_projection(scene: Scene, axis, jitter=None, out_size: int = 64,
                      attenuation: float = 3.1) -> np.ndarray:
    """Parallel-beam attenuation image of the scene along `axis`.

    `jitter` is (rotation_degrees (3,), translation (2,)) applied to the
    whole projection frame; None means the canonical frame.
    """
    if out_size < 32:
        raise ConfigError("render_projection needs out_size >= 32")
    axis = np.asarray(axis, dtype=np.float64)
    rot_deg = np.zeros(3)
    trans = np.zeros(2)
    if jitter is not None:
        rot_deg = np.asarray(jitter[0], dtype=np.float64)
        trans = np.asarray(jitter[1], dtype=np.float64)
    rot = _rotation(rot_deg)
    d = rot @ (axis / np.linalg.norm(axis))
    u, v = _frame(axis)
    u, v = rot @ u, rot @ v

    s = out_size
    coords = ((np.arange(s) + 0.5) / s - 0.5) * _FOV
    pu = coords[None, :] + trans[0]
    pv = coords[:, None] + trans[1]
    origins = (
        _CENTER[None, None, :]
        + pu[:, :, None] * u[None, None, :]
        + pv[:, :, None] * v[None, None, :]
        - 2.0 * d[None, None, :]
    ).reshape(-1, 3)

    tau = np.zeros(origins.shape[0])
    for prim in scene.primitives:
        tau += prim.density * primitive_chords(origins, d, prim)
    pix = np.rint(255.0 * np.exp(-attenuation * tau))
    return np.clip(pix, 0, 255).astype(np.uint8).reshape(s, s)


# -- scene generation ------------------------------------------------------------


def _inside_unit(center, radii):
    return np.clip(center, radii + 0.01, 1.0 - radii - 0.01)


def generate_scene(rng: np.random.Generator, cfg: GeneratorConfig) -> Scene:
    """Random anatomy stand-in with planted findings."""
    prims: list[Primitive] = []

    body_radii = np.array([rng.uniform(0.34, 0.42),
                           rng.uniform(0.24, 0.30),
                           rng.uniform(0.24, 0.30)])
    prims.append(Primitive("ellipsoid", _CENTER.copy(), body_radii,
                           rng.uniform(0.25, 0.4)))

    # spine: chain of dense links along x with a gentle curve
    n_links = int(rng.integers(8, 13))
    xs = np.linspace(0.18, 0.82, n_links)
    bend = rng.uniform(-0.05, 0.05)
    wiggle = rng.uniform(0.0, 0.03)
    ys = 0.5 + bend * np.sin(np.pi * (xs - 0.18) / 0.64)
    zs = 0.62 + wiggle * np.cos(2 * np.pi * xs)
    links = np.stack([xs, ys, zs], axis=1)
    link_radii = np.full(3, rng.uniform(0.028, 0.04))
    prims.append(Primitive("chain", links.mean(axis=0), link_radii,
                           rng.uniform(2.2, 3.0), links=links))

    n_organs = int(rng.integers(cfg.organ_count_range[0],
                                cfg.organ_count_range[1] + 1))
    for _ in range(n_organs):
        radii = rng.uniform(0.05, 0.14, size=3)
        center = _inside_unit(rng.uniform(0.25, 0.75, size=3), radii)
        prims.append(Primitive("ellipsoid", center, radii, rng.uniform(0.6, 1.4)))

    flags = {name: False for name in LABELS}
    if rng.random() < cfg.foreign_body_rate:
        radii = np.full(3, rng.uniform(0.035, 0.055))
        center = _inside_unit(rng.uniform(0.3, 0.7, size=3), radii)
        prims.append(Primitive("ellipsoid", center, radii, rng.uniform(7.0, 11.0)))
        flags["foreign_body"] = True
    if rng.random() < cfg.effusion_rate:
        radii = rng.uniform(0.12, 0.2, size=3)
        center = _inside_unit(rng.uniform(0.35, 0.65, size=3), radii)
        prims.append(Primitive("ellipsoid", center, radii, rng.uniform(0.5, 0.8)))
        flags["effusion"] = True

    return Scene(primitives=prims, anomaly_flags=flags)


def generate_study(seed: int, cfg: GeneratorConfig) -> Study:
    """Deterministic study: same (seed, cfg) gives byte-identical views."""
    cfg.validate()
    rng = rng_from(seed)
    scene = generate_scene(rng, cfg)
    study_id = f"s{seed:010d}"
    views = []
    for k in range(cfg.num_views):
        tag, axis = _PROJECTIONS[k % len(_PROJECTIONS)]
        rot = rng.uniform(-cfg.jitter_deg, cfg.jitter_deg, size=3)
        trans = rng.uniform(-cfg.jitter_translation, cfg.jitter_translation, size=2)
        img = render_projection(scene, axis, (rot, trans), cfg.image_size,
                                cfg.attenuation)
        views.append(View(
            image_id=f"{study_id}-v{k}-{tag}",
            projection=tag,
            image=img,
        ))
    return Study(study_id=study_id, views=views, labels=dict(scene.anomaly_flags))
