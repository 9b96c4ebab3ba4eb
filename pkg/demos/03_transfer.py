# coding: utf-8

# # Fine-tuning for segmentation and depth
#
# Takes the checkpoint from 02_pretrain_micro.py (or pretrains a fresh one)
# and fine-tunes the whole network twice per task: once from the pretrained
# weights and once from a random start with the same seed and budget.
#
# Runtime: roughly a minute.

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from densevit import autodiff as ad
from densevit.checkpoint import load_checkpoint
from densevit.data import Dataset, SyntheticShapesSpec, render_sample
from densevit.finetune import FinetuneSchedule, depth_forward, finetune, format_report, seg_forward
from densevit.vit import preset

out = Path(__file__).parent / "out"
ckpt_path = out / "micro.dckp"
if not ckpt_path.exists():
    raise SystemExit("run demos/02_pretrain_micro.py first")
ckpt = load_checkpoint(ckpt_path)


def shapes(count, seed):
    spec = SyntheticShapesSpec(count=count, seed=seed)
    s = [render_sample(spec, i) for i in range(count)]
    return Dataset(np.stack([a for a, _, _ in s]), np.stack([m for _, m, _ in s]).astype(np.int64),
                   np.stack([d for _, _, d in s]))


train, val = shapes(200, 1), shapes(50, 2)
schedule = FinetuneSchedule(base_lr=1e-3, epochs=20, batch_size=16, seed=0)


# ## Segmentation: four classes (background plus three shape kinds)

runs = {}
for task in ("seg", "depth"):
    for name, init in (("random", None), ("pretrained", ckpt)):
        runs[task, name] = finetune(task, train, val, schedule, checkpoint=init, vit=preset("micro"))
        print(f"{name:>10} init\n" + format_report(runs[task, name].report))


# ## Looking at predictions

res_seg, res_depth = runs["seg", "pretrained"], runs["depth", "pretrained"]
with ad.no_grad():
    seg = seg_forward(val.images[:4], res_seg.params, res_seg.vit).data.argmax(1)
    depth = depth_forward(val.images[:4], res_depth.params, res_depth.vit).data[:, 0]

fig, axes = plt.subplots(4, 5, figsize=(10, 8))
for i in range(4):
    panels = (np.moveaxis(val.images[i], 0, -1), val.masks[i], seg[i], val.depths[i], depth[i])
    for ax, panel, title in zip(axes[i], panels, ("image", "mask", "predicted", "depth", "predicted")):
        ax.imshow(panel, **({} if panel.ndim == 3 else {"cmap": "viridis"}))
        ax.set_title(title, fontsize=8)
        ax.axis("off")
fig.savefig(out / "predictions.png", dpi=110, bbox_inches="tight")
print("figure written to", out / "predictions.png")
