"""Synthetic shapes datasets, on-disk formats, manifests and batch iteration.

Images are RGB PNG, masks single-channel PNG of class indices (background
0), and depth maps a raw raster: 16-byte header (``b"DPTH"``, u32 width,
u32 height, u32 reserved = 0) followed by little-endian float32 rows.
Manifests are tab-separated ``image<TAB>mask<TAB>depth`` lines with paths
relative to the manifest; empty fields mean "absent". An optional first line
``# split=<name>`` tags the split.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DecodeError, EmptyDataset
from .interp import resize_bilinear

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")
DEPTH_MAGIC = b"DPTH"


@dataclass(frozen=True)
class SyntheticShapesSpec:
    count: int = 100
    image_size: int = 32
    num_classes: int = 3
    shapes_per_image: tuple = (1, 3)
    size_range: tuple = (0.18, 0.4)   # shape radius as a fraction of image_size
    depth_range: tuple = (0.1, 10.0)
    depth_rule: str = "size"          # "size": larger shapes are nearer; "random"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must lie in [1, {len(SHAPES)}]")
        if self.depth_rule not in ("size", "random"):
            raise ValueError(f"unknown depth rule {self.depth_rule!r}")


@dataclass
class Manifest:
    root: Path
    records: list                      # (image, mask | None, depth | None) relative paths
    split: str = ""

    def __len__(self):
        return len(self.records)

    def path(self, rel) -> Path | None:
        return None if rel is None else self.root / rel


# -- rendering ---------------------------------------------------------------

def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        s = 0.8 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == "triangle":
        # upward equilateral triangle inscribed in radius r
        return (v <= r / 2) & (math.sqrt(3) * u - v <= r) & (-math.sqrt(3) * u - v <= r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "cross":
        t = r / 3
        return ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    dist2 = u * u + v * v
    return (dist2 <= r * r) & (dist2 >= (0.55 * r) ** 2)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random color field modulated by an oriented sinusoidal grating."""
    coarse = rng.uniform(0.0, 1.0, size=(3, 4, 4)).astype(np.float32)
    base = resize_bilinear(coarse, size, size)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(1.5, 5.0)
    phase = rng.uniform(0, 2 * math.pi)
    grating = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    amp = rng.uniform(0.2, 0.4)
    grain = rng.normal(0.0, 0.03, size=(3, size, size))
    out = (0.6 * base + 0.2) * (1.0 + amp * grating) + grain
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_sample(spec: SyntheticShapesSpec, index: int):
    """(image [3,S,S] float32, mask [S,S] uint8, depth [S,S] float32) for one sample."""
    rng = np.random.default_rng([spec.seed, index])
    S = spec.image_size
    d_min, d_max = spec.depth_range
    img = _background(rng, S)
    mask = np.zeros((S, S), dtype=np.uint8)
    depth = np.full((S, S), d_max, dtype=np.float32)

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    lo, hi = spec.shapes_per_image
    shapes = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        kind = int(rng.integers(spec.num_classes))
        frac = rng.uniform(*spec.size_range)
        r = frac * S
        cx, cy = rng.uniform(0.15 * S, 0.85 * S, size=2)
        theta = rng.uniform(0, 2 * math.pi) if SHAPES[kind] in ("square", "triangle", "cross") else 0.0
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        if spec.depth_rule == "size":
            t = (frac - spec.size_range[0]) / (spec.size_range[1] - spec.size_range[0])
            z = d_max - (d_max - d_min) * (0.15 + 0.7 * t) + rng.uniform(-0.1, 0.1) * (d_max - d_min) * 0.1
        else:
            z = rng.uniform(d_min, d_max)
        z = float(np.clip(z, d_min + 1e-3, d_max - 1e-3))
        shapes.append((z, kind, r, cx, cy, theta, color))

    for z, kind, r, cx, cy, theta, color in sorted(shapes, key=lambda s: -s[0]):
        c, s = math.cos(theta), math.sin(theta)
        u = c * (xx - cx) + s * (yy - cy)
        v = -s * (xx - cx) + c * (yy - cy)
        m = _shape_mask(SHAPES[kind], u, v, r)
        img[:, m] = color[:, None]
        mask[m] = kind + 1
        depth[m] = z
    return img, mask, depth


# -- file formats ------------------------------------------------------------

def save_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.moveaxis(img, 0, -1), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # PIL raises a zoo of types on bad data
        raise DecodeError(path, str(exc)) from None
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.int64)
    except Exception as exc:
        raise DecodeError(path, str(exc)) from None


def save_depth(path, depth: np.ndarray) -> None:
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", w, h, 0) + depth.tobytes())


def load_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != DEPTH_MAGIC:
        raise DecodeError(path, "bad depth header")
    w, h, _ = struct.unpack_from("<III", buf, 4)
    if len(buf) != 16 + 4 * w * h:
        raise DecodeError(path, "depth payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_manifest(path, manifest: Manifest) -> None:
    lines = [f"# split={manifest.split}"] if manifest.split else []
    for rec in manifest.records:
        lines.append("\t".join("" if x is None else str(x) for x in rec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    split, records = "", []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# split="):
                split = line[len("# split="):].strip()
            continue
        fields = line.split("\t") + ["", ""]
        records.append(tuple(f or None for f in fields[:3]))
    return Manifest(path.parent, records, split)


def generate_shapes(spec: SyntheticShapesSpec, out_dir, split: str = "train") -> Manifest:
    """Render ``spec.count`` samples into out_dir and write ``manifest.tsv``."""
    out = Path(out_dir)
    for sub in ("images", "masks", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(spec.count):
        img, mask, depth = render_sample(spec, i)
        rec = (f"images/{i:06d}.png", f"masks/{i:06d}.png", f"depth/{i:06d}.dpth")
        save_image(out / rec[0], img)
        save_mask(out / rec[1], mask)
        save_depth(out / rec[2], depth)
        records.append(rec)
    manifest = Manifest(out, records, split)
    write_manifest(out / "manifest.tsv", manifest)
    return manifest


# -- batching ----------------------------------------------------------------

def epoch_order(n: int, shuffle_seed: int | None, epoch: int = 0) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size  # drop-last


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    masks: np.ndarray | None = None
    depths: np.ndarray | None = None


@dataclass
class Dataset:
    """A manifest decoded into memory."""
    images: np.ndarray
    masks: np.ndarray | None = None
    depths: np.ndarray | None = None
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_manifest(cls, manifest: Manifest, targets: bool = True) -> "Dataset":
        if len(manifest) == 0:
            raise EmptyDataset("manifest lists no images")
        images = np.stack([load_image(manifest.path(r[0])) for r in manifest.records])
        masks = depths = None
        if targets and all(r[1] for r in manifest.records):
            masks = np.stack([load_mask(manifest.path(r[1])) for r in manifest.records])
        if targets and all(r[2] for r in manifest.records):
            depths = np.stack([load_depth(manifest.path(r[2])) for r in manifest.records])
        return cls(images, masks, depths, [r[0] for r in manifest.records])

    def batches(self, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
        order = epoch_order(len(self), shuffle_seed, epoch)
        for k in range(batches_per_epoch(len(self), batch_size)):
            idx = order[k * batch_size:(k + 1) * batch_size]
            yield Batch(idx, self.images[idx],
                        None if self.masks is None else self.masks[idx],
                        None if self.depths is None else self.depths[idx])


def load_batchiter(manifest: Manifest, batch_size: int, shuffle_seed: int | None = None,
                   epoch: int = 0, targets: bool = False):
    """Decode and yield drop-last batches in a deterministic per-epoch order."""
    if len(manifest) == 0:
        raise EmptyDataset("manifest lists no images")
    order = epoch_order(len(manifest), shuffle_seed, epoch)
    for k in range(batches_per_epoch(len(manifest), batch_size)):
        idx = order[k * batch_size:(k + 1) * batch_size]
        recs = [manifest.records[i] for i in idx]
        images = np.stack([load_image(manifest.path(r[0])) for r in recs])
        masks = depths = None
        if targets and all(r[1] for r in recs):
            masks = np.stack([load_mask(manifest.path(r[1])) for r in recs])
        if targets and all(r[2] for r in recs):
            depths = np.stack([load_depth(manifest.path(r[2])) for r in recs])
        yield Batch(idx, images, masks, depths)
