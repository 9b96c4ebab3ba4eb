"""AdamW with decoupled weight decay, learning-rate schedules, layer-wise decay."""
from __future__ import annotations

import math
import re

import numpy as np

from .errors import ShapeMismatch

_NORM = re.compile(r"(^|\.)norm\d*\.")


def uses_weight_decay(name: str) -> bool:
    """Biases, norm parameters, the class token and positional embeddings are not decayed."""
    if name.endswith(".bias") or _NORM.search(name):
        return False
    return not (name.endswith("cls_token") or name.endswith("pos_embed"))


class AdamW:
    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 lr_multipliers: dict | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_multipliers = lr_multipliers or {}
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step_lr = lr * self.lr_multipliers.get(name, 1.0)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and uses_weight_decay(name):
                update = update + self.weight_decay * p.data
            p.data -= (step_lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        state = {"t": self.t}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k, p in self.params.items():
            for buf, key in ((self.m, f"m.{k}"), (self.v, f"v.{k}")):
                arr = np.asarray(state[key])
                if arr.shape != p.data.shape:
                    raise ShapeMismatch(f"optimizer state {key} has shape {arr.shape}, parameter {p.data.shape}")
                buf[k] = arr.astype(p.data.dtype, copy=True)


def cosine_warmup_lr(step: int, total_steps: int, peak: float, warmup_steps: int) -> float:
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def poly_lr(step: int, total_steps: int, base: float, power: float) -> float:
    return base * (1.0 - step / total_steps) ** power


def layer_lr_multipliers(depth: int, gamma: float) -> dict:
    """Head 1.0, block k (0-based) gamma**(depth-k), embeddings gamma**(depth+1)."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("layer decay must lie in (0, 1]")
    return {
        "head": 1.0,
        "blocks": [gamma ** (depth - k) for k in range(depth)],
        "embed": gamma ** (depth + 1),
    }


def param_lr_multipliers(names, depth: int, gamma: float) -> dict:
    groups = layer_lr_multipliers(depth, gamma)
    out = {}
    for name in names:
        m = re.match(r"encoder\.blocks\.(\d+)\.", name)
        if m:
            out[name] = groups["blocks"][int(m.group(1))]
        elif name.startswith("encoder.") and not name.startswith("encoder.norm."):
            out[name] = groups["embed"]
        else:
            out[name] = groups["head"]
    return out
