"""Command-line entry point: ``densevit <command> --config run.ini [--set section.key=value ...]``.

Exit status is 0 on success, 1 on usage errors (bad flags, unknown command,
malformed or unreadable config) and 2 on runtime errors (missing files, corrupt data,
incompatible checkpoints).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .augment import AugPolicy
from .autodiff import Tensor
from .checkpoint import describe, load_checkpoint, save_checkpoint
from .config import ConfigError
from .contrastive import ContrastiveConfig
from .data import Dataset, SyntheticShapesSpec, generate_shapes, read_manifest
from .errors import DenseViTError
from .finetune import (DepthHeadConfig, FinetuneSchedule, SegHeadConfig, evaluate, finetune,
                       format_report)
from .pretrain import PretrainSetup, TrainConfig, epoch_means, pretrain
from .vit import PRESETS, ViTConfig

log = logging.getLogger("densevit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _require(values: dict, key: str, section: str) -> str:
    if not values.get(key):
        raise ConfigError(f"[{section}] {key} is required")
    return values[key]


def _vit_config(cp) -> ViTConfig:
    values = cfgmod.section(cp, "vit")
    name = values.get("preset", "micro")
    if name not in PRESETS:
        raise ConfigError(f"unknown vit preset {name!r}; choose from {', '.join(PRESETS)}")
    return cfgmod.build(ViTConfig, values, ViTConfig(**PRESETS[name]), skip=("preset",))


def _pretrain_setup(cp) -> PretrainSetup:
    return PretrainSetup(
        _vit_config(cp),
        cfgmod.build(ContrastiveConfig, cfgmod.section(cp, "contrastive")),
        cfgmod.build(TrainConfig, cfgmod.section(cp, "train")),
        cfgmod.build(AugPolicy, cfgmod.section(cp, "augment")),
    )


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, cp) -> int:
    values = cfgmod.section(cp, "generate")
    out = args.out or _require(values, "out", "generate")
    split = values.get("split", "train")
    spec = cfgmod.build(SyntheticShapesSpec, values, skip=("out", "split"))
    manifest = generate_shapes(spec, out, split)
    print(f"wrote {len(manifest)} samples to {Path(out) / 'manifest.tsv'}")
    return 0


def cmd_pretrain(args, cp) -> int:
    setup = _pretrain_setup(cp)
    data = cfgmod.section(cp, "data")
    manifest = read_manifest(_require(data, "manifest", "data"))
    out = args.out or cfgmod.section(cp, "output").get("dir") or "runs/pretrain"
    ckpt, records = pretrain(manifest, setup, out_dir=out, resume_from=args.resume)
    means = epoch_means(records)
    if means:
        print(f"steps {ckpt.step}  first-epoch loss {means[0]:.4f}  last-epoch loss {means[-1]:.4f}")
    print(f"checkpoints in {out}")
    return 0


def _finetune(task: str, args, cp) -> int:
    values = cfgmod.section(cp, "finetune")
    train = read_manifest(_require(values, "train_manifest", "finetune"))
    val = read_manifest(_require(values, "val_manifest", "finetune"))
    ckpt_path = args.checkpoint or values.get("checkpoint") or None
    schedule = cfgmod.build(FinetuneSchedule, values, skip=("train_manifest", "val_manifest", "checkpoint"))
    vit = _vit_config(cp) if cp.has_section("vit") or ckpt_path is None else None
    ckpt = load_checkpoint(ckpt_path) if ckpt_path else None
    seg = cfgmod.build(SegHeadConfig, cfgmod.section(cp, "seg"))
    depth = cfgmod.build(DepthHeadConfig, cfgmod.section(cp, "depth"))
    result = finetune(task, Dataset.from_manifest(train), Dataset.from_manifest(val), schedule,
                      checkpoint=ckpt, vit=vit, seg=seg, depth=depth)
    out = Path(args.out or cfgmod.section(cp, "output").get("dir") or f"runs/{task}")
    out.mkdir(parents=True, exist_ok=True)
    final = result.checkpoint(schedule)
    final.config.update({"seg": asdict(seg), "depth": asdict(depth)})
    save_checkpoint(out / "finetuned.dckp", final)
    report = format_report(result.report)
    (out / "report.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def cmd_finetune_seg(args, cp) -> int:
    return _finetune("seg", args, cp)


def cmd_finetune_depth(args, cp) -> int:
    return _finetune("depth", args, cp)


def cmd_eval(args, cp) -> int:
    values = cfgmod.section(cp, "eval")
    ckpt = load_checkpoint(args.checkpoint or _require(values, "checkpoint", "eval"))
    manifest = read_manifest(args.manifest or _require(values, "manifest", "eval"))
    task = ckpt.config.get("task")
    if task not in ("seg", "depth"):
        raise DenseViTError("checkpoint carries no fine-tuned head; run finetune-seg or finetune-depth first")
    params = {k: Tensor(v) for k, v in ckpt.tensors.items()}
    vit = ViTConfig(**ckpt.config["vit"])
    seg = SegHeadConfig(**ckpt.config.get("seg", {}))
    dcfg = dict(ckpt.config.get("depth", {}))
    for key in ("depth_range", "stage_channels"):
        if dcfg.get(key) is not None:
            dcfg[key] = tuple(dcfg[key])
    depth = DepthHeadConfig(**dcfg)
    data = Dataset.from_manifest(manifest)
    sys.stdout.write(format_report(evaluate(task, params, vit, data, seg, depth)))
    return 0


def cmd_inspect(args, cp) -> int:
    crc_ok, rows = describe(args.path)
    width = max([len(name) for name, _, _ in rows] + [4])
    print(f"{'name':<{width}}  {'shape':<16}  crc32")
    for name, shape, crc in rows:
        status = "truncated" if crc is None else f"{crc:08x}"
        print(f"{name:<{width}}  {str(list(shape)):<16}  {status}")
    print(f"file CRC: {'ok' if crc_ok else 'MISMATCH'}")
    return 0 if crc_ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densevit", description="Dense local-to-global contrastive pretraining for ViTs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="INI run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    p = common(sub.add_parser("gen-data", help="render a synthetic shapes dataset"))
    p.add_argument("--out", help="output directory (overrides [generate] out)")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p.add_argument("--out", help="run directory for checkpoints and metrics.tsv")
    p.add_argument("--resume", metavar="CKPT", help="resume from a pretraining checkpoint")
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("finetune-seg", cmd_finetune_seg), ("finetune-depth", cmd_finetune_depth)):
        p = common(sub.add_parser(name, help=f"fine-tune for {name.split('-')[1]} and evaluate"))
        p.add_argument("--checkpoint", help="pretrained checkpoint (omit for random init)")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=func)

    p = common(sub.add_parser("eval", help="evaluate a fine-tuned checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("inspect-ckpt", help="print a checkpoint's tensor table"))
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("densevit: error: a command is required")
        cp = cfgmod.load_config(args.config, args.overrides)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"densevit: config error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, cp)
    except ConfigError as exc:
        print(f"densevit: config error: {exc}", file=sys.stderr)
        return 1
    except (DenseViTError, OSError, ValueError) as exc:
        print(f"densevit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
