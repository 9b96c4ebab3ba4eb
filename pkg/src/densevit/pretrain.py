"""Self-supervised pretraining loop with the dense local-to-global objective."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugPolicy, make_view_pair
from .checkpoint import Checkpoint, assign_tensors, load_checkpoint, save_checkpoint
from .contrastive import ContrastiveConfig, contrastive_loss, init_head, project, ProjectedFeatures
from .data import Dataset, Manifest, batches_per_epoch
from .errors import EmptyDataset
from .optim import AdamW, cosine_warmup_lr
from .vit import ViTConfig, forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    warmup_fraction: float = 0.05
    weight_decay: float = 0.05
    seed: int = 0
    lr_reference_batch: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / self.lr_reference_batch

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_step(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the batch-scaled peak, then cosine decay to 0."""
    warmup = int(round(config.warmup_fraction * total_steps))
    return cosine_warmup_lr(step, total_steps, config.peak_lr, warmup)


@dataclass
class PretrainSetup:
    vit: ViTConfig
    contrastive: ContrastiveConfig = ContrastiveConfig()
    train: TrainConfig = TrainConfig()
    augment: AugPolicy = AugPolicy()

    def to_dict(self) -> dict:
        return {"vit": self.vit.to_dict(), "contrastive": self.contrastive.to_dict(),
                "train": self.train.to_dict(), "augment": self.augment.to_dict()}


def init_model(setup: PretrainSetup) -> dict:
    rng = np.random.default_rng([setup.train.seed, 0xC0DE])
    params = init_params(setup.vit, rng)
    params.update(init_head(setup.vit.embed_dim, setup.contrastive, rng))
    return params


def make_optimizer(params: dict, config: TrainConfig) -> AdamW:
    return AdamW(params, lr=config.peak_lr, betas=(config.beta1, config.beta2), eps=config.eps,
                 weight_decay=config.weight_decay)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x57E9, step])


def make_views(images: np.ndarray, rng: np.random.Generator, policy: AugPolicy):
    pairs = [make_view_pair(img, r, policy) for img, r in zip(images, rng.spawn(len(images)))]
    return np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs])


def compute_loss(views_a, views_b, params: dict, setup: PretrainSetup, training=True, rng=None) -> ad.Tensor:
    """Encode both views with shared weights, project, and apply the contrastive loss."""
    B = views_a.shape[0]
    tokens = forward(np.concatenate([views_a, views_b]), params, setup.vit, training, rng)
    feats = project(tokens, params, setup.contrastive)
    fa = ProjectedFeatures(feats.global_[:B], feats.patches[:B])
    fb = ProjectedFeatures(feats.global_[B:], feats.patches[B:])
    return contrastive_loss(fa, fb, setup.contrastive)


def train_step(batch_images: np.ndarray, params: dict, optimizer: AdamW, setup: PretrainSetup,
               rng: np.random.Generator, lr: float) -> float:
    """One augmentation -> encode -> loss -> backward -> AdamW update; returns the loss."""
    aug_rng, drop_rng = rng.spawn(2)
    views_a, views_b = make_views(batch_images, aug_rng, setup.augment)
    if views_a.shape[0] == 1:
        log.warning("batch of one image: dense negative set is empty, loss is identically 0")
    loss = compute_loss(views_a, views_b, params, setup, training=True, rng=drop_rng)
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step(lr)
    return loss.item()


def make_checkpoint(params: dict, optimizer: AdamW, setup: PretrainSetup, step: int) -> Checkpoint:
    return Checkpoint(
        config=setup.to_dict(),
        tensors={k: p.data for k, p in params.items()},
        optimizer=optimizer.state_dict(),
        rng_state={"seed": setup.train.seed, "step": step},
        step=step,
    )


def setup_from_config(config: dict) -> PretrainSetup:
    aug = dict(config["augment"])
    for key in ("crop_scale_range", "ratio_range", "jitter_strengths", "blur_sigma_range"):
        aug[key] = tuple(aug[key])
    return PretrainSetup(ViTConfig(**config["vit"]), ContrastiveConfig(**config["contrastive"]),
                         TrainConfig(**config["train"]), AugPolicy(**aug))


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: float
    wall_ms: float

    def line(self) -> str:
        return f"{self.step}\t{self.epoch}\t{self.lr:.9g}\t{self.loss:.9g}\t{self.wall_ms:.3f}"


def pretrain(data, setup: PretrainSetup, out_dir=None, resume_from=None, max_steps: int | None = None):
    """Run the pretraining loop.

    ``data`` is a Manifest or an in-memory Dataset. Returns (final Checkpoint,
    list of StepRecord). Checkpoints are written after every epoch and at the
    end when ``out_dir`` is given; ``max_steps`` stops early (as an interrupt
    would) after writing a checkpoint.
    """
    dataset = Dataset.from_manifest(data, targets=False) if isinstance(data, Manifest) else data
    cfg = setup.train
    if len(dataset) == 0 or len(dataset) < cfg.batch_size:
        raise EmptyDataset(f"need at least {cfg.batch_size} images, got {len(dataset)}")
    per_epoch = batches_per_epoch(len(dataset), cfg.batch_size)
    total = cfg.epochs * per_epoch

    params = init_model(setup)
    optimizer = make_optimizer(params, cfg)
    step = 0
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        assign_tensors(params, ckpt.tensors)
        optimizer.load_state_dict(ckpt.optimizer)
        step = ckpt.step

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "metrics.tsv", "a" if step else "w", encoding="utf-8")

    records = []
    stop = total if max_steps is None else min(total, max_steps)
    try:
        while step < stop:
            epoch, k = divmod(step, per_epoch)
            batch = next(b for i, b in enumerate(dataset.batches(cfg.batch_size, cfg.seed, epoch)) if i == k)
            lr = lr_at_step(step, total, cfg)
            t0 = time.perf_counter()
            loss = train_step(batch.images, params, optimizer, setup, step_rng(cfg.seed, step), lr)
            rec = StepRecord(step, epoch, lr, loss, 1000 * (time.perf_counter() - t0))
            records.append(rec)
            if logf is not None:
                logf.write(rec.line() + "\n")
            step += 1
            if out is not None and step % per_epoch == 0:
                save_checkpoint(out / f"epoch{step // per_epoch:03d}.dckp",
                                make_checkpoint(params, optimizer, setup, step))
    finally:
        if logf is not None:
            logf.close()

    final = make_checkpoint(params, optimizer, setup, step)
    if out is not None:
        save_checkpoint(out / ("final.dckp" if step == total else f"step{step:06d}.dckp"), final)
    return final, records


def epoch_means(records) -> list:
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r.epoch, []).append(r.loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
