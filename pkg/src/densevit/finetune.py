"""Dense-prediction fine-tuning: linear segmentation head and up-projection depth head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .data import Dataset, Manifest
from .errors import IncompatibleCheckpoint, NoValidPixels, ShapeMismatch
from .interp import bilinear_matrix
from .metrics import ConfusionAccumulator, abs_rel, delta_threshold, miou, rmse
from .optim import AdamW, param_lr_multipliers, poly_lr
from .vit import ViTConfig, forward, init_params, interpolate_pos_embed, trunc_normal


@dataclass(frozen=True)
class SegHeadConfig:
    num_classes: int = 4
    ignore_index: int = 255

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("segmentation needs at least 2 classes")


@dataclass(frozen=True)
class DepthHeadConfig:
    up_stages: int | None = None          # None -> log2(patch_size)
    stage_channels: tuple | None = None   # None -> halve embed_dim per stage (>= 8)
    depth_range: tuple = (0.1, 10.0)
    smoothness_weight: float = 0.1

    def __post_init__(self):
        lo, hi = self.depth_range
        if not hi > lo >= 0:
            raise ValueError("depth_range needs d_max > d_min >= 0")


@dataclass(frozen=True)
class FinetuneSchedule:
    base_lr: float = 1e-4
    poly_power: float = 1.0
    weight_decay: float = 0.005
    drop_path_rate: float = 0.1
    layer_decay: float = 0.75
    epochs: int = 64
    batch_size: int = 16
    seed: int = 0
    use_layer_decay: bool | None = None   # None -> on for seg, off for depth
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError("layer_decay must lie in (0, 1]")
        if not self.poly_power > 0:
            raise ValueError("poly_power must be > 0")


# -- heads -------------------------------------------------------------------

def init_seg_head(embed_dim: int, config: SegHeadConfig, rng: np.random.Generator) -> dict:
    return {
        "seg_head.weight": Tensor(trunc_normal(rng, (embed_dim, config.num_classes)), requires_grad=True),
        "seg_head.bias": Tensor(np.zeros(config.num_classes), requires_grad=True),
    }


def _patch_grid(tokens: Tensor, vit: ViTConfig, height: int, width: int) -> Tensor:
    B, _, d = tokens.shape
    gh, gw = height // vit.patch_size, width // vit.patch_size
    return tokens[:, 1:].reshape(B, gh, gw, d)


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of the last two axes."""
    x = ad.as_tensor(x)
    mh = bilinear_matrix(x.shape[-2], out_h).astype(x.dtype)
    mw = bilinear_matrix(x.shape[-1], out_w).T.astype(x.dtype)
    return ad.matmul(ad.matmul(mh, x), mw)


def seg_forward(images, params: dict, vit: ViTConfig, head: SegHeadConfig | None = None,
                training=False, rng=None) -> Tensor:
    """Per-pixel class logits [B, C, H, W] from patch tokens via a linear map."""
    images = ad.as_tensor(images)
    H, W = images.shape[-2:]
    tokens = forward(images, params, vit, training, rng)
    grid = _patch_grid(tokens, vit, H, W)
    logits = ad.linear(grid, params["seg_head.weight"], params["seg_head.bias"])  # B,gh,gw,C
    return upsample_bilinear(logits.transpose(0, 3, 1, 2), H, W)


def depth_stage_layout(embed_dim: int, patch_size: int, config: DepthHeadConfig):
    stages = config.up_stages
    if stages is None:
        stages = int(round(math.log2(patch_size)))
    if 2 ** stages != patch_size:
        raise ShapeMismatch(f"{stages} stride-2 stages cannot invert patch size {patch_size}")
    channels = config.stage_channels or tuple(max(8, embed_dim // 2 ** (s + 1)) for s in range(stages))
    if len(channels) != stages:
        raise ShapeMismatch(f"{len(channels)} stage widths for {stages} stages")
    return stages, tuple(channels)


def init_depth_head(embed_dim: int, patch_size: int, config: DepthHeadConfig, rng: np.random.Generator) -> dict:
    stages, channels = depth_stage_layout(embed_dim, patch_size, config)
    params, cin = {}, embed_dim
    for s, cout in enumerate(channels):
        std = math.sqrt(2.0 / (2.25 * cin))  # ~2.25*cin taps reach each output pixel
        params[f"depth_head.up.{s}.weight"] = Tensor(rng.normal(0, std, (cin, cout, 3, 3)), requires_grad=True)
        params[f"depth_head.up.{s}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    params["depth_head.out.weight"] = Tensor(trunc_normal(rng, (cin, 1)), requires_grad=True)
    params["depth_head.out.bias"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def dilated_sigmoid(x, d_min: float, d_max: float) -> Tensor:
    """d_min + (d_max - d_min) * sigmoid(x), kept strictly inside (d_min, d_max)."""
    x = ad.as_tensor(x)
    s = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
    clipped = np.clip(s, 1e-6, 1 - 1e-6)
    out = (d_min + (d_max - d_min) * clipped).astype(x.dtype)
    live = clipped == s

    def bw(g):
        return (g * (d_max - d_min) * s * (1 - s) * live,)

    return ad.custom_op(out, (x,), bw)


def depth_head_logits(grid: Tensor, params: dict) -> Tensor:
    """[B, d, g, g] feature grid -> [B, 1, H, W] pre-activation depth map."""
    x, s = grid, 0
    while f"depth_head.up.{s}.weight" in params:
        x = ad.gelu(ad.conv_transpose2d(x, params[f"depth_head.up.{s}.weight"], params[f"depth_head.up.{s}.bias"]))
        s += 1
    y = ad.linear(x.transpose(0, 2, 3, 1), params["depth_head.out.weight"], params["depth_head.out.bias"])
    return y.transpose(0, 3, 1, 2)


def depth_forward(images, params: dict, vit: ViTConfig, head: DepthHeadConfig = DepthHeadConfig(),
                  training=False, rng=None) -> Tensor:
    images = ad.as_tensor(images)
    H, W = images.shape[-2:]
    tokens = forward(images, params, vit, training, rng)
    grid = _patch_grid(tokens, vit, H, W).transpose(0, 3, 1, 2)
    y = depth_head_logits(grid, params)
    if y.shape[-2:] != (H, W):
        raise ShapeMismatch(f"depth head produced {y.shape[-2:]}, expected {(H, W)}")
    return dilated_sigmoid(y, *head.depth_range)


# -- losses ------------------------------------------------------------------

def berhu_loss(pred, target, valid_mask=None) -> Tensor:
    """Reverse Huber: |e| below c = 0.2 max|e|, (e^2 + c^2) / 2c above.

    The threshold is differentiated through as well (it follows the largest
    error), so the gradient matches finite differences away from ties.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    mask = target > 0 if valid_mask is None else np.asarray(valid_mask, dtype=bool).reshape(pred.shape)
    count = int(mask.sum())
    if count == 0:
        raise NoValidPixels("berhu_loss: mask selects no pixels")
    e = np.where(mask, pred.data - target, 0)
    a = np.abs(e)
    k = np.unravel_index(int(np.argmax(a)), a.shape)
    c = 0.2 * a[k]
    if c == 0:
        return ad.custom_op(np.zeros((), pred.dtype), (pred,), lambda g: (np.zeros_like(pred.data),))
    quad = a > c
    terms = np.where(quad, (e * e + c * c) / (2 * c), a)
    out = np.asarray(terms[mask].sum() / count, dtype=pred.dtype)

    def bw(g):
        de = np.where(quad, e / c, np.sign(e)) * mask
        dc = float(np.where(quad & mask, (c * c - e * e) / (2 * c * c), 0).sum())
        de[k] += dc * 0.2 * np.sign(e[k])
        return ((g / count) * de,)

    return ad.custom_op(out, (pred,), bw)


def smoothness_loss(pred) -> Tensor:
    """Mean squared forward difference along x plus the same along y."""
    pred = ad.as_tensor(pred)
    if pred.shape[-1] < 2 or pred.shape[-2] < 2:
        raise ShapeMismatch("smoothness_loss needs at least a 2x2 map")
    dx = pred[..., :, 1:] - pred[..., :, :-1]
    dy = pred[..., 1:, :] - pred[..., :-1, :]
    return (dx * dx).mean() + (dy * dy).mean()


def depth_loss(pred, target, valid_mask=None, smoothness_weight: float = 0.1) -> Tensor:
    loss = berhu_loss(pred, target, valid_mask)
    if smoothness_weight:
        loss = loss + smoothness_weight * smoothness_loss(pred)
    return loss


# -- pipeline ----------------------------------------------------------------

def prepare_encoder(checkpoint: Checkpoint | None, vit: ViTConfig | None, image_size: int,
                    drop_path_rate: float, rng: np.random.Generator):
    """Encoder params for fine-tuning, pos-embed resampled to ``image_size``."""
    if vit is not None:
        base = vit
    elif checkpoint is not None:
        try:
            base = ViTConfig(**checkpoint.config["vit"])
        except (KeyError, TypeError) as exc:
            raise IncompatibleCheckpoint(f"checkpoint lacks a usable encoder config: {exc}") from None
    else:
        raise ValueError("need a checkpoint or an encoder config")
    try:
        cfg = replace(base, image_size=image_size, drop_path_rate=drop_path_rate)
    except ShapeMismatch as exc:
        raise IncompatibleCheckpoint(str(exc)) from None
    params = init_params(cfg, rng)
    if checkpoint is None:
        return params, cfg
    for name, p in params.items():
        if name not in checkpoint.tensors:
            raise IncompatibleCheckpoint(f"checkpoint has no tensor {name}")
        arr = checkpoint.tensors[name]
        if name.endswith("pos_embed"):
            arr = interpolate_pos_embed(arr, cfg.grid_size)
        if arr.shape != p.data.shape:
            raise IncompatibleCheckpoint(f"tensor {name}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = np.array(arr, dtype=np.float32)
    return params, cfg


@dataclass
class FinetuneResult:
    task: str
    params: dict
    vit: ViTConfig
    report: list
    losses: list = field(default_factory=list)

    def checkpoint(self, schedule: FinetuneSchedule | None = None) -> Checkpoint:
        config = {"vit": self.vit.to_dict(), "task": self.task}
        if schedule is not None:
            config["schedule"] = asdict(schedule)
        return Checkpoint(config=config, tensors={k: p.data for k, p in self.params.items()},
                          step=len(self.losses), meta={"report": self.report})


def _flip(batch_images, target, rng, prob):
    flip = rng.random(len(batch_images)) < prob
    images = np.where(flip[:, None, None, None], batch_images[..., ::-1], batch_images)
    target = np.where(flip.reshape((-1,) + (1,) * (target.ndim - 1)), target[..., ::-1], target)
    return np.ascontiguousarray(images), np.ascontiguousarray(target)


def evaluate(task: str, params: dict, vit: ViTConfig, data: Dataset, seg: SegHeadConfig | None = None,
             depth: DepthHeadConfig | None = None, batch_size: int = 32) -> list:
    """Metric records ``{"task", "metric", "value"}`` on a dataset."""
    records = []
    with ad.no_grad():
        if task == "seg":
            acc = ConfusionAccumulator(seg.num_classes, seg.ignore_index)
            for start in range(0, len(data), batch_size):
                logits = seg_forward(data.images[start:start + batch_size], params, vit, seg).data
                acc.update(logits.argmax(axis=1), data.masks[start:start + batch_size])
            pixel_acc = float(np.trace(acc.counts) / acc.total)
            records += [{"task": task, "metric": "mIoU", "value": miou(acc)},
                        {"task": task, "metric": "pixel_acc", "value": pixel_acc}]
        else:
            preds = np.concatenate([
                depth_forward(data.images[s:s + batch_size], params, vit, depth).data[:, 0]
                for s in range(0, len(data), batch_size)])
            gt = data.depths
            records += [{"task": task, "metric": "AbsRel", "value": abs_rel(preds, gt)},
                        {"task": task, "metric": "RMSE", "value": rmse(preds, gt)},
                        {"task": task, "metric": "delta1", "value": delta_threshold(preds, gt, k=1)}]
    return records


def finetune(task: str, train: Dataset, val: Dataset, schedule: FinetuneSchedule = FinetuneSchedule(),
             checkpoint: Checkpoint | None = None, vit: ViTConfig | None = None,
             seg: SegHeadConfig | None = None, depth: DepthHeadConfig | None = None) -> FinetuneResult:
    """Fine-tune the whole network on a dense task and evaluate on ``val``.

    ``checkpoint=None`` trains from a random initialization of ``vit``.
    """
    if task not in ("seg", "depth"):
        raise ValueError(f"unknown task {task!r}")
    if isinstance(train, Manifest):
        train = Dataset.from_manifest(train)
    if isinstance(val, Manifest):
        val = Dataset.from_manifest(val)
    seg = seg or SegHeadConfig()
    depth = depth or DepthHeadConfig()
    rng = np.random.default_rng([schedule.seed, 0xF1E])
    image_size = train.images.shape[-1]
    params, cfg = prepare_encoder(checkpoint, vit, image_size, schedule.drop_path_rate, rng)
    if task == "seg":
        params.update(init_seg_head(cfg.embed_dim, seg, rng))
        targets = train.masks
    else:
        params.update(init_depth_head(cfg.embed_dim, cfg.patch_size, depth, rng))
        targets = train.depths
    if targets is None:
        raise ValueError(f"training data has no targets for task {task!r}")

    layer_decay = schedule.use_layer_decay if schedule.use_layer_decay is not None else task == "seg"
    gamma = schedule.layer_decay if layer_decay else 1.0
    optimizer = AdamW(params, lr=schedule.base_lr, weight_decay=schedule.weight_decay,
                      lr_multipliers=param_lr_multipliers(params, cfg.depth, gamma))

    per_epoch = len(train) // schedule.batch_size
    total = schedule.epochs * per_epoch
    losses, step = [], 0
    for epoch in range(schedule.epochs):
        order = np.random.default_rng([schedule.seed, 0xBA7, epoch]).permutation(len(train))
        for k in range(per_epoch):
            idx = order[k * schedule.batch_size:(k + 1) * schedule.batch_size]
            step_rng = np.random.default_rng([schedule.seed, 0x5E9, step])
            images, target = _flip(train.images[idx], targets[idx], step_rng, schedule.flip_prob)
            if task == "seg":
                logits = seg_forward(images, params, cfg, seg, training=True, rng=step_rng)
                loss = ad.cross_entropy(logits, target, seg.ignore_index)
            else:
                pred = depth_forward(images, params, cfg, depth, training=True, rng=step_rng)
                loss = depth_loss(pred, target[:, None], None, depth.smoothness_weight)
            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step(poly_lr(step, total, schedule.base_lr, schedule.poly_power))
            losses.append(loss.item())
            step += 1

    report = evaluate(task, params, cfg, val, seg, depth)
    return FinetuneResult(task, params, cfg, report, losses)


def format_report(records) -> str:
    return "".join(f"{r['task']}\t{r['metric']}\t{r['value']:.6f}\n" for r in records)


def parse_report(text: str) -> list:
    out = []
    for line in text.splitlines():
        if line.strip():
            task, metric, value = line.split("\t")
            out.append({"task": task, "metric": metric, "value": float(value)})
    return out
