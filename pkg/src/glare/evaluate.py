"""Representation-quality checks: segmentation probe, attention and PCA export.

The probe is a two-stage upsampling conv decoder trained on patch-token
grids; with a handful of parameters it turns frozen (or adapter-trainable)
encoder features into per-pixel class logits. Metrics are the usual
confusion-matrix quantities: mIoU over classes present in the ground truth,
all-pixel accuracy, and mean class accuracy.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .data import SegFolder, load_image, save_image
from .train import load_encoder

IGNORE_LABEL = 255


@dataclass
class SegMetrics:
    miou: float
    aacc: float
    macc: float
    per_class_iou: list[float]

    def as_dict(self):
        return {"miou": self.miou, "aacc": self.aacc, "macc": self.macc,
                "per_class_iou": self.per_class_iou}


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                     ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = gt != ignore_label
    pred = pred[keep].astype(np.int64)
    gt = gt[keep].astype(np.int64)
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes):
        raise ValueError("prediction labels outside [0, n_classes)")
    if gt.size and (gt.min() < 0 or gt.max() >= n_classes):
        raise ValueError("ground-truth labels outside [0, n_classes)")
    idx = gt * n_classes + pred
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes)


def metrics_from_confusion(conf: np.ndarray) -> SegMetrics:
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    present = gt_count > 0
    iou = np.full(conf.shape[0], np.nan)
    np.divide(tp, union, out=iou, where=union > 0)
    acc = np.divide(tp, gt_count, out=np.zeros_like(tp), where=present)
    miou = float(np.nanmean(np.where(present, iou, np.nan))) if present.any() else 0.0
    aacc = float(tp.sum() / conf.sum()) if conf.sum() else 0.0
    macc = float(acc[present].mean()) if present.any() else 0.0
    per_class = [float(iou[c]) if present[c] and union[c] > 0 else float("nan")
                 for c in range(conf.shape[0])]
    return SegMetrics(miou=miou, aacc=aacc, macc=macc, per_class_iou=per_class)


def seg_metrics(pred, gt, n_classes: int,
                ignore_label: int = IGNORE_LABEL) -> SegMetrics:
    """Confusion-matrix mIoU / aAcc / mAcc for one prediction-target pair."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    return metrics_from_confusion(confusion_matrix(pred, gt, n_classes, ignore_label))


class SegProbe(nn.Module):
    """Two upsampling conv stages from a patch-token grid to pixel logits."""

    def __init__(self, dim: int, n_classes: int, width: int = 32,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, n_classes, 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.out):
                conv.weight.normal_(0.0, 0.05, generator=generator)
                conv.bias.zero_()

    def forward(self, tokens: torch.Tensor, grid_rows: int, grid_cols: int,
                out_size: int) -> torch.Tensor:
        """tokens [B,N,D] -> logits [B, n_classes, out_size, out_size]."""
        b, n, d = tokens.shape
        x = tokens.transpose(1, 2).reshape(b, d, grid_rows, grid_cols)
        x = F.relu(self.conv1(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = F.relu(self.conv2(x))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.out(x)
        return F.interpolate(x, size=(out_size, out_size), mode="bilinear",
                             align_corners=False)


@dataclass
class ProbeReport:
    per_seed: list[SegMetrics]
    mean_miou: float
    std_miou: float
    mean_aacc: float
    mean_macc: float

    def as_dict(self):
        return {"per_seed": [m.as_dict() for m in self.per_seed],
                "mean_miou": self.mean_miou, "std_miou": self.std_miou,
                "mean_aacc": self.mean_aacc, "mean_macc": self.mean_macc}


def _encode_patches(encoder, images: torch.Tensor):
    cls, _, patches, _ = encoder(images)
    return patches


def _evaluate_probe(encoder, probe, dataset, n_classes, batch: int = 16):
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    grid = None
    with torch.no_grad():
        for start in range(0, len(dataset), batch):
            items = [dataset[i] for i in range(start, min(start + batch, len(dataset)))]
            images = torch.stack([im for im, _ in items])
            masks = torch.stack([mk for _, mk in items])
            grid = encoder.grid_of(images)
            patches = _encode_patches(encoder, images)
            logits = probe(patches, grid.rows, grid.cols, masks.shape[-1])
            pred = logits.argmax(dim=1)
            conf += confusion_matrix(pred.numpy(), masks.numpy(), n_classes)
    return metrics_from_confusion(conf)


def finetune_probe(checkpoint_path, dataset_root, iters: int = 500,
                   seeds=(0, 1, 2), n_classes: int = 5, lr: float = 1e-3,
                   batch: int = 16, train_adapters: bool = True,
                   encoder=None) -> ProbeReport:
    """Train the probe per seed on dataset_root/train, score on /val.

    train_adapters keeps the backbone frozen but lets the adapters move with
    the probe; with train_adapters=False the encoder is fully frozen and the
    probe alone is fitted. An already-loaded encoder can be passed to skip
    checkpoint reads.
    """
    root = Path(dataset_root)
    train_set = SegFolder(root / "train")
    val_set = SegFolder(root / "val")
    results = []
    for seed in seeds:
        if encoder is None:
            model, _ = load_encoder(checkpoint_path)
            enc = model.encoder
        else:
            enc = copy.deepcopy(encoder)
        for p in enc.parameters():
            p.requires_grad_(False)
        params = []
        if train_adapters:
            for _, p in enc.adapter_parameters():
                p.requires_grad_(True)
                params.append(p)
        gen = torch.Generator().manual_seed(seed)
        probe = SegProbe(enc.cfg.dim, n_classes, generator=gen)
        params = list(probe.parameters()) + params
        opt = torch.optim.AdamW(params, lr=lr, weight_decay=1e-4)

        cached = None
        if not train_adapters:
            with torch.no_grad():
                images = torch.stack([train_set[i][0] for i in range(len(train_set))])
                cached = _encode_patches(enc, images)
        masks_all = torch.stack([train_set[i][1] for i in range(len(train_set))])
        images_all = None
        if train_adapters:
            images_all = torch.stack([train_set[i][0] for i in range(len(train_set))])
        grid = enc.grid_of(train_set[0][0].unsqueeze(0))

        n = len(train_set)
        for it in range(iters):
            idx = torch.randint(0, n, (min(batch, n),), generator=gen)
            masks = masks_all[idx]
            if train_adapters:
                patches = _encode_patches(enc, images_all[idx])
            else:
                patches = cached[idx]
            logits = probe(patches, grid.rows, grid.cols, masks.shape[-1])
            loss = F.cross_entropy(logits, masks, ignore_index=IGNORE_LABEL)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        results.append(_evaluate_probe(enc, probe, val_set, n_classes))
    mious = np.array([m.miou for m in results])
    return ProbeReport(per_seed=results,
                       mean_miou=float(mious.mean()),
                       std_miou=float(mious.std()),
                       mean_aacc=float(np.mean([m.aacc for m in results])),
                       mean_macc=float(np.mean([m.macc for m in results])))


def _to_heatmap_rgb(values: np.ndarray, cmap_name: str = "viridis") -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    rgba = colormaps[cmap_name](norm)
    return (rgba[..., :3] * 255.0).round().astype(np.uint8)


def export_attention(checkpoint_path, image_path, out_dir,
                     block_index: int = -1) -> list[Path]:
    """Per-head [CLS] attention heatmaps plus a mean composite.

    Writes one PNG per head and 'attention_mean.png', and a raw .npz with the
    bilinearly upsampled maps for downstream checks.
    """
    model, _ = load_encoder(checkpoint_path)
    encoder = model.encoder
    image = load_image(image_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        _, _, _, attn = encoder(image.unsqueeze(0), attention_from=block_index)
    grid = encoder.grid_of(image.unsqueeze(0))
    maps = attn[0].reshape(-1, grid.rows, grid.cols)
    upsampled = F.interpolate(maps.unsqueeze(1), size=image.shape[-2:],
                              mode="bilinear", align_corners=False).squeeze(1)
    files = []
    arrays = {}
    for h in range(upsampled.shape[0]):
        arr = upsampled[h].numpy()
        path = out_dir / f"attention_head{h}.png"
        Image.fromarray(_to_heatmap_rgb(arr)).save(path)
        files.append(path)
        arrays[f"head{h}"] = arr
    mean_map = upsampled.mean(dim=0).numpy()
    mean_path = out_dir / "attention_mean.png"
    Image.fromarray(_to_heatmap_rgb(mean_map)).save(mean_path)
    files.append(mean_path)
    arrays["mean"] = mean_map
    np.savez(out_dir / "attention_raw.npz", **arrays)
    return files


def pca_scores(tokens: np.ndarray, n_components: int = 3):
    """Top principal-component scores of mean-centered rows via SVD.

    Returns (scores [n, k], components [k, d]). Requires at least
    n_components distinct rows.
    """
    distinct = np.unique(tokens, axis=0).shape[0]
    if distinct < n_components:
        raise ValueError(
            f"degenerate token set: {distinct} distinct rows < {n_components}")
    centered = tokens - tokens.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:n_components]
    return centered @ components.T, components


def export_pca_embedding(checkpoint_path, image_paths, out_dir) -> list[Path]:
    """Map patch tokens of the given images to RGB via their top-3 principal
    components (min-max scaled per channel over all images jointly)."""
    if not image_paths:
        raise ValueError("need at least one image")
    model, _ = load_encoder(checkpoint_path)
    encoder = model.encoder
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    token_blocks = []
    grids = []
    for path in image_paths:
        image = load_image(path)
        with torch.no_grad():
            patches = _encode_patches(encoder, image.unsqueeze(0))[0]
        token_blocks.append(patches.double().numpy())
        grids.append((encoder.grid_of(image.unsqueeze(0)), image.shape[-2:]))
    all_tokens = np.concatenate(token_blocks, axis=0)
    scores, _ = pca_scores(all_tokens, 3)
    lo = scores.min(axis=0, keepdims=True)
    hi = scores.max(axis=0, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb_all = (scores - lo) / span
    files = []
    offset = 0
    for i, ((grid, (h, w)), path) in enumerate(zip(grids, image_paths)):
        n = grid.n_patches
        rgb = rgb_all[offset:offset + n].reshape(grid.rows, grid.cols, 3)
        offset += n
        img = torch.from_numpy(rgb).permute(2, 0, 1).unsqueeze(0)
        img = F.interpolate(img, size=(h, w), mode="nearest")[0]
        out_path = out_dir / f"pca_{i:02d}_{Path(path).stem}.png"
        save_image(img.float(), out_path)
        files.append(out_path)
    return files


def write_probe_report(report: ProbeReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.as_dict(), indent=1) + "\n")
    return path
