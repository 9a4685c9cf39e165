"""Image ingestion and the procedurally generated shapes dataset.

The shapes dataset stands in for full-size segmentation benchmarks in the
verification loop: 64x64 images of colored geometric figures on a textured
background, with exact per-pixel class masks produced by the same
rasterization that draws the figures. Classes: 0 background, 1 disk,
2 rectangle, 3 triangle, 4 ring.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path) -> torch.Tensor:
    """Decode a raster file to a float [C,H,W] tensor in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(tensor: torch.Tensor, path):
    """Write a float [C,H,W] tensor in [0,1] (or [H,W] labels) as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = tensor.detach().cpu().numpy()
    if arr.ndim == 2:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
        return
    arr = np.clip(arr, 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def list_images(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    files = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise FileNotFoundError(f"no images under {root}")
    return files


class ImageFolder:
    """Flat folder of raster images (or a dataset root with an images/ dir)."""

    def __init__(self, root):
        root = Path(root)
        if (root / "images").is_dir():
            root = root / "images"
        self.paths = list_images(root)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i) -> torch.Tensor:
        return load_image(self.paths[i])


class SegFolder:
    """images/ and masks/ subfolders with matching stems; masks are
    single-channel label rasters."""

    def __init__(self, root):
        root = Path(root)
        self.image_paths = list_images(root / "images")
        mask_dir = root / "masks"
        self.mask_paths = []
        for p in self.image_paths:
            candidates = [mask_dir / (p.stem + ext) for ext in IMAGE_EXTENSIONS]
            found = next((c for c in candidates if c.exists()), None)
            if found is None:
                raise FileNotFoundError(f"no mask for {p.name} under {mask_dir}")
            self.mask_paths.append(found)

    def __len__(self):
        return len(self.image_paths)

    def __getitem__(self, i):
        img = load_image(self.image_paths[i])
        with Image.open(self.mask_paths[i]) as im:
            mask = np.asarray(im.convert("L"), dtype=np.int64)
        return img, torch.from_numpy(mask)


N_SHAPE_CLASSES = 5

_CLASS_COLORS = {
    1: (0.85, 0.25, 0.25),  # disk: red
    2: (0.25, 0.55, 0.85),  # rectangle: blue
    3: (0.30, 0.75, 0.35),  # triangle: green
    4: (0.85, 0.75, 0.25),  # ring: yellow
}


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.6, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    tilt = rng.uniform(-0.15, 0.15, size=2)
    img = base[:, None, None] + tilt[0] * yy + tilt[1] * xx
    img += rng.normal(0.0, 0.015, size=(3, size, size))
    return img


def _shape_mask(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.uniform(0.2, 0.8) * size
    cx = rng.uniform(0.2, 0.8) * size
    r = rng.uniform(0.10, 0.22) * size
    if cls == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 2:
        h = rng.uniform(0.12, 0.25) * size
        w = rng.uniform(0.12, 0.25) * size
        return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= w)
    if cls == 3:
        h = rng.uniform(0.15, 0.30) * size
        half = rng.uniform(0.10, 0.25) * size
        inside = (yy >= cy - h / 2) & (yy <= cy + h / 2)
        frac = np.clip((yy - (cy - h / 2)) / h, 0.0, 1.0)
        return inside & (np.abs(xx - cx) <= half * frac)
    if cls == 4:
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        r_in = r * rng.uniform(0.45, 0.65)
        return (d2 <= r * r) & (d2 >= r_in * r_in)
    raise ValueError(f"unknown shape class {cls}")


def make_shapes_image(rng: np.random.Generator, size: int = 64):
    """One synthetic sample: float image [3,S,S] and uint8 label mask [S,S]."""
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    n_shapes = int(rng.integers(1, 4))
    classes = rng.choice([1, 2, 3, 4], size=n_shapes, replace=False)
    for cls in classes:
        m = _shape_mask(rng, int(cls), size)
        color = np.array(_CLASS_COLORS[int(cls)])
        color = np.clip(color + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
        img[:, m] = color[:, None] + rng.normal(0.0, 0.01, size=(3, int(m.sum())))
        mask[m] = cls
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def generate_shapes_dataset(root, n_train: int = 256, n_val: int = 64,
                            size: int = 64, seed: int = 0):
    """Write train/ and val/ splits in the images/ + masks/ folder layout."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_train), ("val", n_val)):
        for i in range(count):
            img, mask = make_shapes_image(rng, size)
            stem = f"{split}_{i:04d}"
            save_image(torch.from_numpy(img), root / split / "images" / f"{stem}.png")
            save_image(torch.from_numpy(mask), root / split / "masks" / f"{stem}.png")
    return root
