"""Grayscale image resampling and photometric ops, numpy only.

All functions take and return 2-D float64 or float32 arrays (uint8 inputs
are promoted); nothing here touches the autodiff tape.  Geometry uses the
half-pixel-center convention; out-of-bounds samples take the fill value.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _axis_weights(n_in: int, n_out: int):
    """Source indices and lerp weights for one separable bilinear axis."""
    if n_out == n_in:
        idx = np.arange(n_in)
        return idx, idx, np.zeros(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    w = src - lo
    lo0 = np.clip(lo, 0, n_in - 1)
    lo1 = np.clip(lo + 1, 0, n_in - 1)
    return lo0, lo1, w


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize (no antialiasing), float64 math."""
    if img.ndim != 2:
        raise DimensionError("resize_bilinear expects a 2-D image")
    a = img.astype(np.float64, copy=False)
    r0, r1, wr = _axis_weights(img.shape[0], out_h)
    c0, c1, wc = _axis_weights(img.shape[1], out_w)
    rows = a[r0, :] * (1.0 - wr)[:, None] + a[r1, :] * wr[:, None]
    out = rows[:, c0] * (1.0 - wc)[None, :] + rows[:, c1] * wc[None, :]
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror across the vertical axis."""
    return img[:, ::-1].copy()


def standardize(img: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero-mean unit-variance windowing of one image."""
    a = img.astype(np.float64, copy=False)
    mu = a.mean()
    sd = a.std()
    return (a - mu) / (sd + eps)


# -- geometric warps ---------------------------------------------------------


def _sample_bilinear(img, ys, xs, fill):
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def tap(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.full(yy.shape, float(fill))
        vals[inside] = img[yy[inside], xx[inside]]
        return vals

    v00 = tap(y0, x0)
    v01 = tap(y0, x0 + 1)
    v10 = tap(y0 + 1, x0)
    v11 = tap(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def warp_projective(img: np.ndarray, matrix: np.ndarray, fill: float = 255.0):
    """Apply a 3x3 projective transform (output->input mapping is its inverse).

    `matrix` maps input (x, y, 1) homogeneous coords to output coords,
    about the image center.
    """
    a = img.astype(np.float64, copy=False)
    h, w = a.shape
    inv = np.linalg.inv(matrix)
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ones = np.ones_like(xx, dtype=np.float64)
    pts = np.stack([xx - cx, yy - cy, ones], axis=0).reshape(3, -1)
    src = inv @ pts
    sx = src[0] / src[2] + cx
    sy = src[1] / src[2] + cy
    out = _sample_bilinear(a, sy.reshape(h, w), sx.reshape(h, w), fill)
    return out


def affine_matrix(angle_deg=0.0, translate=(0.0, 0.0), scale=1.0, shear_deg=(0.0, 0.0)):
    """Compose rotate/scale/shear/translate into one 3x3 matrix.

    Translation is in pixels; shear angles in degrees about x and y.
    """
    a = np.deg2rad(angle_deg)
    sx, sy = np.deg2rad(shear_deg[0]), np.deg2rad(shear_deg[1])
    rot = np.array(
        [[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]]
    )
    sh = np.array([[1.0, np.tan(sx), 0.0], [np.tan(sy), 1.0, 0.0], [0.0, 0.0, 1.0]])
    sc = np.array([[scale, 0.0, 0.0], [0.0, scale, 0.0], [0.0, 0.0, 1.0]])
    tr = np.array(
        [[1.0, 0.0, translate[0]], [0.0, 1.0, translate[1]], [0.0, 0.0, 1.0]]
    )
    return tr @ rot @ sh @ sc


def perspective_matrix(rng: np.random.Generator, size: int, distortion: float):
    """Random corner-displacement homography like torchvision's perspective."""
    half = distortion * size / 2.0
    src = np.array(
        [[-size / 2, -size / 2], [size / 2, -size / 2],
         [size / 2, size / 2], [-size / 2, size / 2]],
        dtype=np.float64,
    )
    dst = src + rng.uniform(-half, half, size=(4, 2))
    # solve the 8-dof homography mapping src -> dst
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    sol = np.linalg.solve(np.asarray(rows), np.asarray(rhs))
    return np.array(
        [[sol[0], sol[1], sol[2]], [sol[3], sol[4], sol[5]], [sol[6], sol[7], 1.0]]
    )


# -- photometric ops (PIL-like definitions on [0, 255] grayscale) -------------


def adjust_brightness(img, factor):
    return np.clip(img.astype(np.float64) * factor, 0.0, 255.0)


def adjust_contrast(img, factor):
    a = img.astype(np.float64)
    mean = a.mean()
    return np.clip(mean + (a - mean) * factor, 0.0, 255.0)


def adjust_sharpness(img, factor):
    a = img.astype(np.float64)
    k = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
    padded = np.pad(a, 1, mode="edge")
    smooth = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            smooth += k[dy, dx] * padded[dy : dy + a.shape[0], dx : dx + a.shape[1]]
    return np.clip(smooth + (a - smooth) * factor, 0.0, 255.0)


def autocontrast(img):
    a = img.astype(np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-9:
        return a.copy()
    return (a - lo) * (255.0 / (hi - lo))
