"""Operator commands: pretrain, probe, visualize, inspect.

All subcommands are non-interactive. Exit codes: 0 success, 1 user error
(bad arguments, unreadable inputs, unknown config keys), 2 numeric fault
during training. Relative output directories resolve against $GLARE_RUN_ROOT
when it is set.
"""

from __future__ import annotations

import argparse
import colorsys
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import TransformRecord, sample_crop_box
from .backbone import adapter_parameter_count
from .config import load_config, save_config
from .correspond import match_patches
from .data import ImageFolder, load_image, save_image
from .errors import CheckpointError, GlareError, NumericFault
from .evaluate import (export_attention, export_pca_embedding, finetune_probe,
                       write_probe_report)
from .regions import sample_attention_regions
from .train import Trainer, load_encoder


def _run_root() -> Path:
    return Path(os.environ.get("GLARE_RUN_ROOT", "."))


def _resolve_out(path_str: str) -> Path:
    path = Path(path_str)
    return path if path.is_absolute() else _run_root() / path


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.set or [])
    if args.data:
        cfg.data_root = args.data
    if args.out:
        cfg.out_dir = args.out
    if not cfg.data_root:
        raise ValueError("no data root given (set data_root or pass --data)")
    if not cfg.out_dir:
        raise ValueError("no output directory given (set out_dir or pass --out)")
    run_dir = _resolve_out(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")

    folder = ImageFolder(cfg.data_root)
    images = [folder[i] for i in range(len(folder))]
    if cfg.resume:
        trainer = Trainer.from_checkpoint(cfg.resume, cfg, images)
    else:
        trainer = Trainer(cfg, images)
    print(f"training {trainer.total_steps} steps "
          f"({trainer.steps_per_epoch} per epoch) on {len(images)} images; "
          f"trainable parameters: {trainer.trainable_parameter_count()}")
    trainer.train(run_dir=run_dir)
    print(f"run directory: {run_dir}")
    return 0


def cmd_probe(args) -> int:
    seeds = list(range(args.seeds))
    report = finetune_probe(args.checkpoint, args.data, iters=args.iters,
                            seeds=seeds, n_classes=args.classes,
                            train_adapters=not args.freeze_adapters)
    out = _resolve_out(args.out)
    write_probe_report(report, out)
    print(f"mIoU {report.mean_miou:.4f} +/- {report.std_miou:.4f} "
          f"(aAcc {report.mean_aacc:.4f}, mAcc {report.mean_macc:.4f}) "
          f"over {len(seeds)} seeds -> {out}")
    return 0


def _prepare_encoder_input(image: torch.Tensor, size: int) -> torch.Tensor:
    import torchvision.transforms.functional as TF
    from .augment import AugConfig, _normalize
    resized = TF.resize(image, [size, size], antialias=True)
    return _normalize(resized, AugConfig())


def _region_overlay(image: torch.Tensor, regions, grid, out_path: Path):
    from PIL import Image, ImageDraw
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    im = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(im)
    cell_h = im.height / grid.rows
    cell_w = im.width / grid.cols
    for k, region in enumerate(regions):
        hue = (k * 0.41) % 1.0
        color = tuple(int(c * 255) for c in colorsys.hsv_to_rgb(hue, 0.9, 1.0))
        box = [region.start_col * cell_w, region.start_row * cell_h,
               (region.start_col + region.n_cols) * cell_w - 1,
               (region.start_row + region.n_rows) * cell_h - 1]
        draw.rectangle(box, outline=color, width=2)
        draw.text((box[0] + 2, box[1] + 2), str(k), fill=color)
    im.save(out_path)


def _correspondence_overlay(view_s, view_t, cmap, grid, out_path: Path):
    from PIL import Image
    def to_arr(px):
        return (px.clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
    left, right = to_arr(view_s), to_arr(view_t)
    p = view_s.shape[-1] // grid.cols
    for s, ts in cmap.entries.items():
        hue = (s * 0.137) % 1.0
        tint = np.array([c * 255 for c in colorsys.hsv_to_rgb(hue, 0.9, 1.0)])
        r, c = divmod(s, grid.cols)
        left[r * p:(r + 1) * p, c * p:(c + 1) * p] = (
            0.6 * left[r * p:(r + 1) * p, c * p:(c + 1) * p] + 0.4 * tint)
        for t in ts:
            tr, tc = divmod(t, grid.cols)
            right[tr * p:(tr + 1) * p, tc * p:(tc + 1) * p] = (
                0.6 * right[tr * p:(tr + 1) * p, tc * p:(tc + 1) * p] + 0.4 * tint)
    gap = np.full((left.shape[0], 4, 3), 255, dtype=np.uint8)
    Image.fromarray(np.concatenate([left, gap, right], axis=1)).save(out_path)


def cmd_visualize(args) -> int:
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.mode == "attention":
        files = []
        for image in args.image:
            sub = out_dir / Path(image).stem if len(args.image) > 1 else out_dir
            files += export_attention(args.checkpoint, image, sub,
                                      block_index=args.block)
        print("\n".join(str(f) for f in files))
        return 0
    if args.mode == "pca":
        files = export_pca_embedding(args.checkpoint, args.image, out_dir)
        print("\n".join(str(f) for f in files))
        return 0

    model, _ = load_encoder(args.checkpoint)
    encoder = model.encoder
    size = encoder.cfg.image_size
    gen = torch.Generator().manual_seed(args.seed)

    if args.mode == "regions":
        image = load_image(args.image[0])
        pixels = _prepare_encoder_input(image, size)
        with torch.no_grad():
            _, _, _, attn = encoder(pixels.unsqueeze(0), attention_from=-1)
        grid = encoder.grid_of(pixels.unsqueeze(0))
        from .backbone import AttentionMap
        amap = AttentionMap(per_head=attn[0], grid=grid)
        regions = sample_attention_regions(amap, grid, args.regions_m, 2,
                                           min(6, grid.rows), gen)
        import torchvision.transforms.functional as TF
        shown = TF.resize(image, [size, size], antialias=True)
        out_path = out_dir / "regions.png"
        _region_overlay(shown, regions, grid, out_path)
        sidecar = out_dir / "regions.json"
        sidecar.write_text(json.dumps([
            {"start_row": r.start_row, "start_col": r.start_col,
             "n_rows": r.n_rows, "n_cols": r.n_cols} for r in regions], indent=1))
        print(f"{out_path}\n{sidecar}")
        return 0

    if args.mode == "correspondence":
        image = load_image(args.image[0])
        _, h, w = image.shape
        import torchvision.transforms.functional as TF
        from torchvision.transforms import InterpolationMode
        views, records = [], []
        for _ in range(2):
            top, left, ch, cw = sample_crop_box(h, w, (0.25, 1.0),
                                                (3 / 4, 4 / 3), gen)
            views.append(TF.resized_crop(image, top, left, ch, cw, [size, size],
                                         interpolation=InterpolationMode.BICUBIC,
                                         antialias=True).clamp(0, 1))
            records.append(TransformRecord(crop_x=left, crop_y=top, crop_w=cw,
                                           crop_h=ch, flipped=False,
                                           out_size=size))
        grid = encoder.cfg.grid_for(size, size)
        cmap = match_patches(records[0], grid, records[1], grid, args.min_overlap)
        out_path = out_dir / "correspondence.png"
        _correspondence_overlay(views[0], views[1], cmap, grid, out_path)
        sidecar = out_dir / "correspondence.json"
        sidecar.write_text(json.dumps(
            {"records": [vars(r) for r in records],
             "min_overlap": args.min_overlap,
             "matches": {str(s): sorted(ts) for s, ts in cmap.entries.items()}},
            indent=1))
        print(f"{out_path}\n{sidecar}")
        return 0
    raise ValueError(f"unsupported mode {args.mode!r}")


def cmd_inspect(args) -> int:
    manifest, tensors = ckpt.load_archive(args.checkpoint)
    print(f"format: {manifest['format']} v{manifest['version']}")
    model = manifest.get("model", {})
    backbone = model.get("backbone", {})
    print("model config:")
    for key in sorted(backbone):
        print(f"  {key}: {backbone[key]}")
    for key in sorted(model.get("head", {})):
        print(f"  head.{key}: {model['head'][key]}")

    groups: dict[str, int] = {}
    for name, arr in tensors.items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + int(np.prod(arr.shape))
    print("tensor groups:")
    for group in sorted(groups):
        print(f"  {group}: {groups[group]} parameters")

    if not ckpt.has_group(tensors, "adapters"):
        print("adapters: absent (will initialize)")
    trainable_groups = [g for g in ("adapters", "head", "cross_attention")
                        if g in groups]
    trainable = sum(groups[g] for g in trainable_groups)
    frozen = groups.get("backbone", 0)
    print(f"partition: trainable={trainable} "
          f"({'+'.join(trainable_groups) or 'none stored'}), frozen backbone={frozen}")
    if backbone:
        from .backbone import BackboneConfig
        print(f"analytic adapter budget: "
              f"{adapter_parameter_count(BackboneConfig(**backbone))}")
    config_echo = manifest.get("extra", {}).get("config") or {}
    if config_echo:
        print("run config echo:")
        for line in json.dumps(config_echo, indent=1, sort_keys=True).splitlines():
            print(f"  {line}")
    print(f"step: {manifest.get('extra', {}).get('step', 0)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glare",
        description="Continual self-supervised pre-training with adapters")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run continual pre-training")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.add_argument("--data", default=None, help="image folder (overrides data_root)")
    p.add_argument("--out", default=None, help="run directory (overrides out_dir)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="segmentation probe on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root with train/ and val/")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seeds", type=int, default=3, help="number of probe seeds")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--freeze-adapters", action="store_true",
                   help="train the probe only, adapters stay frozen")
    p.add_argument("--out", default="probe_report.json")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("visualize", help="export rasters from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True,
                   choices=["attention", "pca", "correspondence", "regions"])
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--out", default="viz")
    p.add_argument("--block", type=int, default=-1, help="attention block index")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regions-m", type=int, default=6)
    p.add_argument("--min-overlap", type=float, default=0.5)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("inspect", help="describe a checkpoint archive")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, CheckpointError, GlareError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
