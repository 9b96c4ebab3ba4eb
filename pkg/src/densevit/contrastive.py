"""Projection head and the global/dense InfoNCE objectives.

The dense objective contrasts the class-token feature of one view (anchor)
with every patch feature of the other view (positives). Negatives for an
anchor image are the positive-side patch features of every *other* image in
the batch, so each anchor sees ``(B - 1) * N`` negatives instead of the
``B - 1`` of the global-only objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidTemperature, ShapeMismatch

HEAD_PREFIX = "head."


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    proj_hidden_dim: int | None = None  # None -> encoder embed_dim
    proj_out_dim: int = 128
    symmetric: bool = False
    mode: str = "dense"
    normalize: bool = True
    separate_heads: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidTemperature(f"temperature must be > 0, got {self.temperature}")
        if self.mode not in ("dense", "vanilla"):
            raise ValueError(f"unknown contrastive mode {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectedFeatures:
    global_: Tensor   # [B, p]
    patches: Tensor   # [B, N, p]


@dataclass(frozen=True)
class NegativeSet:
    anchor_image: int
    num_patches: int
    indices: np.ndarray  # rows of the flattened [B*N] positive-side patch table

    def images(self) -> np.ndarray:
        return self.indices // self.num_patches

    def __len__(self):
        return len(self.indices)


def _head_prefixes(config: ContrastiveConfig):
    if config.separate_heads:
        return HEAD_PREFIX + "global.", HEAD_PREFIX + "patch."
    return HEAD_PREFIX, HEAD_PREFIX


def init_head(embed_dim: int, config: ContrastiveConfig, rng: np.random.Generator) -> dict:
    """Projection MLP weights, uniform in +-1/sqrt(fan_in) (weights and biases).

    With this init the projected features of a fresh model are nearly
    equidistant, so the first dense loss sits close to ln(1 + negatives).
    """
    hidden = config.proj_hidden_dim or embed_dim
    dims = [embed_dim, hidden, hidden, config.proj_out_dim]
    params = {}
    for prefix in sorted(set(_head_prefixes(config))):
        for k in range(3):
            bound = 1.0 / np.sqrt(dims[k])
            w = rng.uniform(-bound, bound, (dims[k], dims[k + 1])).astype(np.float32)
            b = rng.uniform(-bound, bound, dims[k + 1]).astype(np.float32)
            params[f"{prefix}fc{k + 1}.weight"] = Tensor(w, requires_grad=True)
            params[f"{prefix}fc{k + 1}.bias"] = Tensor(b, requires_grad=True)
    return params


def _mlp(x, params, prefix):
    h = ad.gelu(ad.linear(x, params[prefix + "fc1.weight"], params[prefix + "fc1.bias"]))
    h = ad.gelu(ad.linear(h, params[prefix + "fc2.weight"], params[prefix + "fc2.bias"]))
    return ad.linear(h, params[prefix + "fc3.weight"], params[prefix + "fc3.bias"])


def project(tokens, head_params: dict, config: ContrastiveConfig = ContrastiveConfig()) -> ProjectedFeatures:
    """Map class and patch tokens through the 3-layer projection MLP."""
    tokens = ad.as_tensor(tokens)
    g_prefix, p_prefix = _head_prefixes(config)
    if g_prefix == p_prefix:
        z = _mlp(tokens, head_params, g_prefix)
        glob, patches = z[:, 0], z[:, 1:]
    else:
        glob = _mlp(tokens[:, 0], head_params, g_prefix)
        patches = _mlp(tokens[:, 1:], head_params, p_prefix)
    if config.normalize:
        glob, patches = ad.l2_normalize(glob), ad.l2_normalize(patches)
    return ProjectedFeatures(glob, patches)


def info_nce(anchor, positive, negatives=None, temperature: float = 0.1) -> Tensor:
    """-log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t})) for a single anchor."""
    if not temperature > 0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    anchor, positive = ad.as_tensor(anchor), ad.as_tensor(positive)
    pos = (anchor * positive).sum().reshape(1)
    parts = [pos]
    if negatives is not None:
        if isinstance(negatives, (list, tuple)):
            negatives = ad.concat([ad.as_tensor(n).reshape(1, -1) for n in negatives], axis=0) if negatives else None
        if negatives is not None and negatives.shape[0] > 0:
            parts.append(ad.matmul(negatives, anchor.reshape(-1, 1)).reshape(-1))
    logits = ad.concat(parts, axis=0) * (1.0 / temperature)
    return -ad.log_softmax(logits, axis=0)[0]


def build_negative_sets(batch_size: int, num_patches: int, anchor_image: int) -> NegativeSet:
    """Indices of every positive-side patch that belongs to another image."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rows = np.arange(batch_size * num_patches)
    return NegativeSet(anchor_image, num_patches, rows[rows // num_patches != anchor_image])


def negative_count(mode: str, batch_size: int, num_patches: int) -> int:
    """Per-anchor negative count for a batch, read off the constructed sets."""
    n = num_patches if mode == "dense" else 1
    return len(build_negative_sets(batch_size, n, 0))


def _check_pair(fa: ProjectedFeatures, fb: ProjectedFeatures):
    if fa.patches.shape != fb.patches.shape or fa.global_.shape != fb.global_.shape:
        raise ShapeMismatch(f"view shapes differ: {fa.patches.shape} vs {fb.patches.shape}")


def _dense_one_direction(anchor: Tensor, patches: Tensor, temperature: float) -> Tensor:
    B, N, p = patches.shape
    sims = ad.matmul(anchor, patches.reshape(B * N, p).transpose(1, 0)) * (1.0 / temperature)  # [B, B*N]
    img = np.repeat(np.arange(B), N)
    pos = sims[img, np.arange(B * N)].reshape(B, N, 1)
    if B == 1:
        return -ad.log_softmax(pos, axis=-1).mean()
    neg_idx = np.stack([build_negative_sets(B, N, b).indices for b in range(B)])  # [B, (B-1)N]
    negs = sims[np.arange(B)[:, None], neg_idx]
    negs = ad.broadcast_to(negs.reshape(B, 1, -1), (B, N, neg_idx.shape[1]))
    logits = ad.concat([pos, negs], axis=-1)
    return -ad.log_softmax(logits, axis=-1)[:, :, 0].mean()


def dense_loss(fa: ProjectedFeatures, fb: ProjectedFeatures, config: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Mean over images and patches of InfoNCE(global of view A, patch i of view B)."""
    _check_pair(fa, fb)
    loss = _dense_one_direction(fa.global_, fb.patches, config.temperature)
    if config.symmetric:
        loss = (loss + _dense_one_direction(fb.global_, fa.patches, config.temperature)) * 0.5
    return loss


def _vanilla_one_direction(anchor: Tensor, positive: Tensor, temperature: float) -> Tensor:
    B = anchor.shape[0]
    sims = ad.matmul(anchor, positive.transpose(1, 0)) * (1.0 / temperature)  # [B, B]
    logp = ad.log_softmax(sims, axis=-1)
    return -logp[np.arange(B), np.arange(B)].mean()


def vanilla_loss(fa: ProjectedFeatures, fb: ProjectedFeatures, config: ContrastiveConfig = ContrastiveConfig()) -> Tensor:
    """Global InfoNCE: z of view A against z+ of view B, other images' z+ as negatives."""
    _check_pair(fa, fb)
    loss = _vanilla_one_direction(fa.global_, fb.global_, config.temperature)
    if config.symmetric:
        loss = (loss + _vanilla_one_direction(fb.global_, fa.global_, config.temperature)) * 0.5
    return loss


def contrastive_loss(fa, fb, config: ContrastiveConfig) -> Tensor:
    if config.mode == "dense":
        return dense_loss(fa, fb, config)
    return vanilla_loss(fa, fb, config)
