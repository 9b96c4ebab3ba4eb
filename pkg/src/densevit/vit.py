"""Vision Transformer encoder: patch embedding, class token, pre-norm blocks.

Parameters live in a flat ``dict[str, Tensor]`` whose keys follow the
checkpoint naming scheme (``encoder.blocks.0.attn.qkv.weight`` ...), so the
same dictionary round-trips between pretraining and fine-tuning.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidGrid, ShapeMismatch
from .interp import bicubic_matrix

PREFIX = "encoder."
# per-channel input standardization applied before patchify
PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32).reshape(1, 3, 1, 1)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32).reshape(1, 3, 1, 1)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeMismatch(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ShapeMismatch(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "micro": dict(image_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=2),
    "mini": dict(image_size=32, patch_size=8, embed_dim=128, depth=4, num_heads=4),
    "tiny": dict(image_size=224, patch_size=16, embed_dim=192, depth=12, num_heads=3),
    "small": dict(image_size=224, patch_size=16, embed_dim=384, depth=12, num_heads=6),
    "base": dict(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12),
}


def preset(name: str, **overrides) -> ViTConfig:
    return ViTConfig(**{**PRESETS[name], **overrides})


def trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(np.float32)


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_params(config: ViTConfig, rng: np.random.Generator) -> dict:
    d = config.embed_dim
    hidden = int(d * config.mlp_ratio)
    patch_dim = config.in_chans * config.patch_size ** 2
    p = {
        "encoder.patch_embed.weight": _param(trunc_normal(rng, (patch_dim, d))),
        "encoder.patch_embed.bias": _param(np.zeros(d)),
        "encoder.cls_token": _param((rng.standard_normal((1, 1, d)) * 0.02).astype(np.float32)),
        "encoder.pos_embed": _param(trunc_normal(rng, (1, config.num_patches + 1, d))),
    }
    for k in range(config.depth):
        b = f"encoder.blocks.{k}."
        p[b + "norm1.weight"] = _param(np.ones(d))
        p[b + "norm1.bias"] = _param(np.zeros(d))
        p[b + "attn.qkv.weight"] = _param(trunc_normal(rng, (d, 3 * d)))
        p[b + "attn.qkv.bias"] = _param(np.zeros(3 * d))
        p[b + "attn.proj.weight"] = _param(trunc_normal(rng, (d, d)))
        p[b + "attn.proj.bias"] = _param(np.zeros(d))
        p[b + "norm2.weight"] = _param(np.ones(d))
        p[b + "norm2.bias"] = _param(np.zeros(d))
        p[b + "mlp.fc1.weight"] = _param(trunc_normal(rng, (d, hidden)))
        p[b + "mlp.fc1.bias"] = _param(np.zeros(hidden))
        p[b + "mlp.fc2.weight"] = _param(trunc_normal(rng, (hidden, d)))
        p[b + "mlp.fc2.bias"] = _param(np.zeros(d))
    p["encoder.norm.weight"] = _param(np.ones(d))
    p["encoder.norm.bias"] = _param(np.zeros(d))
    return p


def patchify(images, patch_size: int) -> Tensor:
    """[B,C,H,W] -> [B, N, C*p*p], row-major over the grid, channel-major inside a patch."""
    images = ad.as_tensor(images)
    B, C, H, W = images.shape
    p = patch_size
    if H % p or W % p:
        raise ShapeMismatch(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = images.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * p * p)


def embed(patches, params: dict) -> Tensor:
    """Project patches to tokens, prepend the class token, add positional embeddings."""
    patches = ad.as_tensor(patches)
    w = params[PREFIX + "patch_embed.weight"]
    if patches.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"patch length {patches.shape[-1]} != embedding input {w.shape[0]}")
    B, N = patches.shape[:2]
    pos = params[PREFIX + "pos_embed"]
    if pos.shape[1] != N + 1:
        raise ShapeMismatch(f"{N} patches but positional embedding has {pos.shape[1] - 1} rows")
    tokens = ad.linear(patches, w, params[PREFIX + "patch_embed.bias"])
    cls = ad.broadcast_to(params[PREFIX + "cls_token"], (B, 1, w.shape[1]))
    return ad.concat([cls, tokens], axis=1) + pos


def attention(x, params: dict, prefix: str, num_heads: int, return_weights=False):
    B, T, d = x.shape
    dh = d // num_heads
    qkv = ad.linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = qkv.reshape(B, T, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = ad.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])
    return (out, weights) if return_weights else out


def drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Zero the residual branch per sample with probability ``rate``; rescale survivors."""
    if rate <= 0.0 or rng is None:
        return branch
    keep = (rng.random(branch.shape[0]) >= rate).astype(branch.dtype)
    scale = keep.reshape((-1,) + (1,) * (branch.ndim - 1)) / (1.0 - rate)
    return branch * scale.astype(branch.dtype)


def encoder_block(tokens, params: dict, index: int, num_heads: int,
                  drop_path_rate: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm block: x + DropPath(Attn(LN(x))), then x + DropPath(MLP(LN(x)))."""
    b = f"{PREFIX}blocks.{index}."
    x = ad.as_tensor(tokens)
    h = ad.layer_norm(x, params[b + "norm1.weight"], params[b + "norm1.bias"])
    x = x + drop_path(attention(h, params, b + "attn.", num_heads), drop_path_rate, rng)
    h = ad.layer_norm(x, params[b + "norm2.weight"], params[b + "norm2.bias"])
    h = ad.gelu(ad.linear(h, params[b + "mlp.fc1.weight"], params[b + "mlp.fc1.bias"]))
    h = ad.linear(h, params[b + "mlp.fc2.weight"], params[b + "mlp.fc2.bias"])
    return x + drop_path(h, drop_path_rate, rng)


def drop_path_rates(config: ViTConfig) -> list:
    # linear ramp 0 -> drop_path_rate across blocks
    if config.depth == 1:
        return [config.drop_path_rate]
    return [config.drop_path_rate * k / (config.depth - 1) for k in range(config.depth)]


def encode_tokens(tokens, params: dict, config: ViTConfig, training=False,
                  rng: np.random.Generator | None = None) -> Tensor:
    x = tokens
    rates = drop_path_rates(config)
    for k in range(config.depth):
        rate = rates[k] if training else 0.0
        x = encoder_block(x, params, k, config.num_heads, rate, rng)
    return ad.layer_norm(x, params[PREFIX + "norm.weight"], params[PREFIX + "norm.bias"])


def forward(images, params: dict, config: ViTConfig, training=False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Encode images to a token sequence [B, N+1, d]; row 0 is the class token."""
    images = ad.as_tensor(images)
    images = (images - PIXEL_MEAN) * (1.0 / PIXEL_STD)
    patches = patchify(images, config.patch_size)
    return encode_tokens(embed(patches, params), params, config, training, rng)


def interpolate_pos_embed(pos: np.ndarray, new_grid: int) -> np.ndarray:
    """Bicubically resample the patch rows of a [1, N+1, d] positional embedding."""
    pos = np.asarray(pos)
    n = pos.shape[1] - 1
    g = math.isqrt(n)
    if g * g != n or new_grid < 1:
        raise InvalidGrid(f"positional embedding with {n} patch rows is not a square grid")
    if new_grid == g:
        return pos.copy()
    d = pos.shape[2]
    m = bicubic_matrix(g, new_grid)
    grid = pos[0, 1:].astype(np.float64).reshape(g, g, d)
    resampled = np.einsum("ia,jb,abd->ijd", m, m, grid)
    out = np.concatenate([pos[0, :1].astype(np.float64), resampled.reshape(new_grid * new_grid, d)])
    return out[None].astype(pos.dtype)
