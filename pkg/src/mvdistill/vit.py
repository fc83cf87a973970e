"""Small Vision Transformer for single-channel square crops.

Produces a CLS embedding, per-patch embeddings (both taken after the final
LayerNorm) and the final block's post-softmax attention.  Two crop
resolutions are supported: learned positional embeddings are sized for the
global grid and bilinearly interpolated for local crops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ParameterError
from .imageops import standardize
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size_global: int = 64
    image_size_local: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1

    def validate(self) -> None:
        if self.image_size_global % self.patch_size:
            raise ConfigError("model.image_size_global not divisible by patch_size")
        if self.image_size_local % self.patch_size:
            raise ConfigError("model.image_size_local not divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("model.embed_dim not divisible by num_heads")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("model.drop_path_rate must be in [0, 1)")

    @property
    def grid_global(self) -> int:
        return self.image_size_global // self.patch_size

    @property
    def grid_local(self) -> int:
        return self.image_size_local // self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class EncoderOutput:
    cls_embedding: np.ndarray       # (embed_dim,)
    patch_embeddings: np.ndarray    # (n_patches, embed_dim)
    final_attention: np.ndarray     # (num_heads, n_tokens, n_tokens)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W) -> (n_patches, patch_size^2), patches in row-major order."""
    h, w = image.shape[-2:]
    if h % patch_size or w % patch_size:
        raise DimensionError(
            f"image {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    if image.ndim == 2:
        x = image.reshape(gh, patch_size, gw, patch_size)
        return x.transpose(0, 2, 1, 3).reshape(gh * gw, patch_size * patch_size)
    b = image.shape[0]
    x = image.reshape(b, gh, patch_size, gw, patch_size)
    return x.transpose(0, 1, 3, 2, 4).reshape(b, gh * gw, patch_size * patch_size)


def unpatchify(tokens: np.ndarray, patch_size: int, height: int, width: int):
    """Inverse of patchify; exact rearrangement."""
    gh, gw = height // patch_size, width // patch_size
    x = tokens.reshape(gh, gw, patch_size, patch_size)
    return x.transpose(0, 2, 1, 3).reshape(height, width)


def bilinear_grid_matrix(g_in: int, g_out: int, dtype=np.float64) -> np.ndarray:
    """(g_out^2, g_in^2) matrix applying align-corners bilinear interpolation."""
    m = np.zeros((g_out * g_out, g_in * g_in), dtype=np.float64)
    if g_out == 1:
        coords = np.array([(g_in - 1) / 2.0])
    elif g_in == 1:
        coords = np.zeros(g_out)
    else:
        coords = np.arange(g_out) * (g_in - 1) / (g_out - 1)
    lo = np.floor(coords).astype(int)
    lo = np.minimum(lo, g_in - 1)
    hi = np.minimum(lo + 1, g_in - 1)
    w = coords - lo
    for r in range(g_out):
        for c in range(g_out):
            for (ri, rw) in ((lo[r], 1 - w[r]), (hi[r], w[r])):
                for (ci, cw) in ((lo[c], 1 - w[c]), (hi[c], w[c])):
                    if rw * cw:
                        m[r * g_out + c, ri * g_in + ci] += rw * cw
    return m.astype(dtype)


def interpolate_pos_embed(pos: np.ndarray, g_target: int) -> np.ndarray:
    """Resample a (g, g, d) positional grid to (g_target, g_target, d)."""
    g = pos.shape[0]
    if pos.shape[1] != g:
        raise DimensionError("positional grid must be square")
    if g_target == g:
        return pos.copy()
    m = bilinear_grid_matrix(g, g_target)
    flat = pos.reshape(g * g, -1)
    return (m @ flat).reshape(g_target, g_target, pos.shape[2])


def drop_path(x: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Stochastic depth over the batch axis: zero a sample's residual branch
    with probability `rate` and rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype.type)
    mask = keep.reshape((-1,) + (1,) * (x.ndim - 1)) / (1.0 - rate)
    return T.mul(x, Tensor(mask))


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_vit_params(cfg: ViTConfig, rng, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameter dict keyed by hierarchical path."""
    cfg.validate()
    d = cfg.embed_dim
    p2 = cfg.patch_size * cfg.patch_size
    n_global = cfg.grid_global * cfg.grid_global
    params: dict[str, np.ndarray] = {
        "cls_token": _trunc_normal(rng, (1, 1, d)),
        "pos_embed": _trunc_normal(rng, (1, 1 + n_global, d)),
        "patch_proj.weight": _trunc_normal(rng, (p2, d)),
        "patch_proj.bias": np.zeros(d),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        params[pre + "norm1.gain"] = np.ones(d)
        params[pre + "norm1.bias"] = np.zeros(d)
        params[pre + "attn.qkv.weight"] = _trunc_normal(rng, (d, 3 * d))
        params[pre + "attn.qkv.bias"] = np.zeros(3 * d)
        params[pre + "attn.out.weight"] = _trunc_normal(rng, (d, d))
        params[pre + "attn.out.bias"] = np.zeros(d)
        params[pre + "norm2.gain"] = np.ones(d)
        params[pre + "norm2.bias"] = np.zeros(d)
        params[pre + "mlp.fc1.weight"] = _trunc_normal(rng, (d, cfg.mlp_dim))
        params[pre + "mlp.fc1.bias"] = np.zeros(cfg.mlp_dim)
        params[pre + "mlp.fc2.weight"] = _trunc_normal(rng, (cfg.mlp_dim, d))
        params[pre + "mlp.fc2.bias"] = np.zeros(d)
    params["norm.gain"] = np.ones(d)
    params["norm.bias"] = np.zeros(d)
    return {
        k: Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()
    }


def transformer_block(x: Tensor, params: dict[str, Tensor], prefix: str,
                      num_heads: int, drop_path_rate: float = 0.0,
                      training: bool = False, rng=None):
    """Pre-norm attention + MLP block; returns (x', attention weights)."""
    b, t, d = x.shape
    dh = d // num_heads
    h = T.layer_norm(x, params[prefix + "norm1.gain"], params[prefix + "norm1.bias"])
    qkv = T.add(T.matmul(h, params[prefix + "attn.qkv.weight"]),
                params[prefix + "attn.qkv.bias"])
    qkv = T.reshape(qkv, (b, t, 3, num_heads, dh))
    q = T.transpose(qkv[:, :, 0], (0, 2, 1, 3))
    k = T.transpose(qkv[:, :, 1], (0, 2, 1, 3))
    v = T.transpose(qkv[:, :, 2], (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, temperature=1.0, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    ctx = T.add(T.matmul(ctx, params[prefix + "attn.out.weight"]),
                params[prefix + "attn.out.bias"])
    x = T.add(x, drop_path(ctx, drop_path_rate, training, rng))
    h2 = T.layer_norm(x, params[prefix + "norm2.gain"], params[prefix + "norm2.bias"])
    mid = T.gelu(T.add(T.matmul(h2, params[prefix + "mlp.fc1.weight"]),
                       params[prefix + "mlp.fc1.bias"]))
    out = T.add(T.matmul(mid, params[prefix + "mlp.fc2.weight"]),
                params[prefix + "mlp.fc2.bias"])
    x = T.add(x, drop_path(out, drop_path_rate, training, rng))
    return x, attn


def init_block_params(rng, dim: int, mlp_dim: int, prefix: str,
                      dtype=np.float32) -> dict[str, Tensor]:
    """Parameters for one transformer_block under `prefix`."""
    raw = {
        prefix + "norm1.gain": np.ones(dim),
        prefix + "norm1.bias": np.zeros(dim),
        prefix + "attn.qkv.weight": _trunc_normal(rng, (dim, 3 * dim)),
        prefix + "attn.qkv.bias": np.zeros(3 * dim),
        prefix + "attn.out.weight": _trunc_normal(rng, (dim, dim)),
        prefix + "attn.out.bias": np.zeros(dim),
        prefix + "norm2.gain": np.ones(dim),
        prefix + "norm2.bias": np.zeros(dim),
        prefix + "mlp.fc1.weight": _trunc_normal(rng, (dim, mlp_dim)),
        prefix + "mlp.fc1.bias": np.zeros(mlp_dim),
        prefix + "mlp.fc2.weight": _trunc_normal(rng, (mlp_dim, dim)),
        prefix + "mlp.fc2.bias": np.zeros(dim),
    }
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}


class ViTEncoder:
    """Holds a config plus a parameter dict; forward passes are pure
    functions of (params, inputs, rng, training)."""

    def __init__(self, cfg: ViTConfig, params: dict[str, Tensor] | None = None,
                 rng=None, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        if params is None:
            if rng is None:
                raise ConfigError("ViTEncoder needs params or an init rng")
            params = init_vit_params(cfg, rng, dtype)
        self.params = params
        self._pos_cache: dict[int, np.ndarray] = {}

    # -- helpers -----------------------------------------------------------

    def _pos_matrix(self, grid: int) -> np.ndarray:
        """Interp matrix from the stored global grid to `grid` (cached)."""
        m = self._pos_cache.get(grid)
        if m is None:
            dtype = self.params["pos_embed"].dtype
            m = bilinear_grid_matrix(self.cfg.grid_global, grid, dtype=dtype)
            self._pos_cache[grid] = m
        return m

    def _positional(self, grid: int) -> Tensor:
        pos = self.params["pos_embed"]
        if grid == self.cfg.grid_global:
            return pos
        cls_pos = pos[:, :1, :]
        grid_pos = pos[:, 1:, :]
        interp = T.matmul(Tensor(self._pos_matrix(grid)), grid_pos)
        return T.concat([cls_pos, interp], axis=1)

    def _crop_grid(self, side: int) -> int:
        if side == self.cfg.image_size_global:
            return self.cfg.grid_global
        if side == self.cfg.image_size_local:
            return self.cfg.grid_local
        raise DimensionError(
            f"crop size {side} is neither global ({self.cfg.image_size_global}) "
            f"nor local ({self.cfg.image_size_local})"
        )

    # -- forward -----------------------------------------------------------

    def forward_batch(self, images: np.ndarray, training: bool = False, rng=None):
        """Encode a (B, S, S) batch of same-size crops.

        Returns (cls: Tensor (B, d), patches: Tensor (B, N, d),
        attention: Tensor (B, heads, T, T)) on the autodiff tape.
        """
        cfg = self.cfg
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise DimensionError("forward_batch expects (B, S, S) square crops")
        if training and cfg.drop_path_rate > 0.0 and rng is None:
            raise ConfigError("training-mode forward needs an rng for DropPath")
        grid = self._crop_grid(images.shape[1])
        dtype = self.params["patch_proj.weight"].dtype

        normed = np.stack([standardize(im) for im in images]).astype(dtype)
        tokens = patchify(normed, cfg.patch_size)
        x = T.add(
            T.matmul(Tensor(tokens), self.params["patch_proj.weight"]),
            self.params["patch_proj.bias"],
        )
        b = images.shape[0]
        ones_b = Tensor(np.ones((b, 1, 1), dtype=dtype))
        cls = T.mul(ones_b, self.params["cls_token"])
        x = T.concat([cls, x], axis=1)
        x = T.add(x, self._positional(grid))

        attn_last = None
        for i in range(cfg.depth):
            x, attn_last = transformer_block(
                x, self.params, f"blocks.{i}.", cfg.num_heads,
                cfg.drop_path_rate, training, rng,
            )

        x = T.layer_norm(x, self.params["norm.gain"], self.params["norm.bias"])
        return x[:, 0, :], x[:, 1:, :], attn_last

    def encode(self, images, training: bool = False, rng=None) -> list[EncoderOutput]:
        """Encode crops of possibly mixed sizes; one EncoderOutput per image,
        in input order.  Inference path (no tape)."""
        images = [np.asarray(im) for im in images]
        by_size: dict[int, list[int]] = {}
        for idx, im in enumerate(images):
            if im.ndim != 2 or im.shape[0] != im.shape[1]:
                raise DimensionError("encode expects square 2-D images")
            by_size.setdefault(im.shape[0], []).append(idx)
        outputs: list[EncoderOutput | None] = [None] * len(images)
        for side, idxs in sorted(by_size.items()):
            batch = np.stack([images[i] for i in idxs])
            with T.no_grad():
                cls, patches, attn = self.forward_batch(batch, training, rng)
            for j, i in enumerate(idxs):
                outputs[i] = EncoderOutput(
                    cls_embedding=cls.data[j].copy(),
                    patch_embeddings=patches.data[j].copy(),
                    final_attention=attn.data[j].copy(),
                )
        return outputs
