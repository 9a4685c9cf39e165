"""Multi-crop augmentation with exact geometric provenance.

Every view carries a TransformRecord (crop box, flip, output size) so that
patch correspondences between views can be recovered later by inverting the
geometry. Photometric distortions follow the BYOL recipe: color jitter with
probability 0.8, grayscale 0.2, and per-slot gaussian blur / solarization
probabilities of (1.0, 0.0), (0.1, 0.2), (0.5, 0.0) for the first global,
second global, and local crops. Normalization is always the final step.

Patch-level blurring happens after view construction: a sampled fraction of
patch cells gets a strong gaussian blur confined to each cell (reflective
padding inside the cell), leaving every other pixel bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode


@dataclass(frozen=True)
class TransformRecord:
    """Geometric provenance of one view: source crop box, flip, output size."""

    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    flipped: bool
    out_size: int

    def __post_init__(self):
        if self.crop_w <= 0 or self.crop_h <= 0 or self.out_size <= 0:
            raise ValueError("degenerate crop or output size")
        if self.crop_x < 0 or self.crop_y < 0:
            raise ValueError("crop box outside source bounds")


@dataclass
class View:
    pixels: torch.Tensor  # [C, S, S], normalized
    record: TransformRecord
    role: str  # "global" | "local"
    blur_mask: tuple[int, ...] = ()
    blur_patch_size: int | None = None


@dataclass
class AugConfig:
    global_size: int = 224
    local_size: int = 96
    n_local: int = 10
    global_scale: tuple[float, float] = (0.25, 1.0)
    local_scale: tuple[float, float] = (0.05, 0.25)
    aspect_ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    # Flip probability is the BYOL-recipe convention, not part of the
    # documented distortion list.
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: tuple[float, float, float] = (1.0, 0.1, 0.5)
    solarize_p: tuple[float, float, float] = (0.0, 0.2, 0.0)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_kernel: int = 9
    solarize_threshold: float = 0.5
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        for p in (self.flip_p, self.jitter_p, self.grayscale_p,
                  *self.blur_p, *self.solarize_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0,1]")
        for lo, hi in (self.global_scale, self.local_scale):
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError("crop scale interval must lie within (0,1]")


@dataclass
class PatchBlurConfig:
    """Patch-level blur policy applied to the student's global views."""

    mode: str = "random"  # random | blockwise
    kernel: int = 5
    sigma: float = 3.0
    ratio_mode: str = "stochastic"  # stochastic sampler | fixed ratio
    fixed_ratio: float = 0.3

    def __post_init__(self):
        if self.mode not in ("random", "blockwise"):
            raise ValueError(f"unknown blur mode {self.mode!r}")
        if self.ratio_mode not in ("stochastic", "fixed"):
            raise ValueError(f"unknown ratio mode {self.ratio_mode!r}")
        if not 0.0 <= self.fixed_ratio <= 1.0:
            raise ValueError("fixed_ratio outside [0,1]")
        if self.kernel % 2 != 1:
            raise ValueError("blur kernel must be odd")


def _rand(gen: torch.Generator) -> float:
    return torch.rand((), generator=gen).item()


def _uniform(gen: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * _rand(gen)


def _randint(gen: torch.Generator, lo: int, hi: int) -> int:
    """Uniform integer in [lo, hi)."""
    return int(torch.randint(lo, hi, (), generator=gen).item())


def sample_crop_box(height: int, width: int, scale: tuple[float, float],
                    ratio: tuple[float, float], gen: torch.Generator):
    """Random-resized-crop box (top, left, h, w), center-crop fallback."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * _uniform(gen, scale[0], scale[1])
        aspect = math.exp(_uniform(gen, log_ratio[0], log_ratio[1]))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = _randint(gen, 0, height - h + 1)
            left = _randint(gen, 0, width - w + 1)
            return top, left, h, w
    # Fallback: clamp aspect to the feasible extreme, centered.
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w, h = width, height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, h, w


def _jitter(img: torch.Tensor, cfg: AugConfig, gen: torch.Generator) -> torch.Tensor:
    b = _uniform(gen, max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
    c = _uniform(gen, max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
    s = _uniform(gen, max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
    h = _uniform(gen, -cfg.hue, cfg.hue)
    img = TF.adjust_brightness(img, b)
    img = TF.adjust_contrast(img, c)
    img = TF.adjust_saturation(img, s)
    img = TF.adjust_hue(img, h)
    return img


def _photometric(img: torch.Tensor, slot: int, cfg: AugConfig,
                 gen: torch.Generator) -> torch.Tensor:
    if _rand(gen) < cfg.jitter_p:
        img = _jitter(img, cfg, gen)
    if _rand(gen) < cfg.grayscale_p:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    if _rand(gen) < cfg.blur_p[slot]:
        sigma = _uniform(gen, *cfg.blur_sigma)
        k = cfg.blur_kernel
        img = TF.gaussian_blur(img, [k, k], [sigma, sigma])
    if _rand(gen) < cfg.solarize_p[slot]:
        img = TF.solarize(img, cfg.solarize_threshold)
    return img


def _normalize(img: torch.Tensor, cfg: AugConfig) -> torch.Tensor:
    mean = torch.tensor(cfg.mean, dtype=img.dtype).view(-1, 1, 1)
    std = torch.tensor(cfg.std, dtype=img.dtype).view(-1, 1, 1)
    return (img - mean) / std


def _make_view(image: torch.Tensor, out_size: int, scale, slot: int, role: str,
               cfg: AugConfig, gen: torch.Generator) -> View:
    _, height, width = image.shape
    top, left, h, w = sample_crop_box(height, width, scale, cfg.aspect_ratio, gen)
    pixels = TF.resized_crop(image, top, left, h, w, [out_size, out_size],
                             interpolation=InterpolationMode.BICUBIC,
                             antialias=True).clamp_(0.0, 1.0)
    flipped = _rand(gen) < cfg.flip_p
    if flipped:
        pixels = TF.hflip(pixels)
    pixels = _photometric(pixels, slot, cfg, gen)
    pixels = _normalize(pixels, cfg)
    record = TransformRecord(crop_x=left, crop_y=top, crop_w=w, crop_h=h,
                             flipped=flipped, out_size=out_size)
    return View(pixels=pixels, record=record, role=role)


def make_views(image: torch.Tensor, cfg: AugConfig, rng: torch.Generator) -> list[View]:
    """Two global views followed by cfg.n_local local views."""
    _, height, width = image.shape
    if height < cfg.local_size or width < cfg.local_size:
        raise ValueError(
            f"source {height}x{width} smaller than local crop {cfg.local_size}")
    views = [
        _make_view(image, cfg.global_size, cfg.global_scale, 0, "global", cfg, rng),
        _make_view(image, cfg.global_size, cfg.global_scale, 1, "global", cfg, rng),
    ]
    for _ in range(cfg.n_local):
        views.append(
            _make_view(image, cfg.local_size, cfg.local_scale, 2, "local", cfg, rng))
    return views


def sample_blur_ratio(rng: torch.Generator) -> float:
    """0 with probability 0.5, otherwise uniform in [0.1, 0.5]."""
    if _rand(rng) < 0.5:
        return 0.0
    return _uniform(rng, 0.1, 0.5)


def _gaussian_kernel2d(kernel: int, sigma: float, dtype, device) -> torch.Tensor:
    half = (kernel - 1) / 2.0
    xs = torch.arange(kernel, dtype=dtype, device=device) - half
    k1 = torch.exp(-(xs ** 2) / (2 * sigma * sigma))
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def _pad_symmetric(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Edge-including reflection. Unlike edge-excluded reflection this keeps a
    normalized separable kernel mass-preserving, so per-cell means survive."""
    x = torch.cat([x[..., :, :pad].flip(-1), x, x[..., :, -pad:].flip(-1)], dim=-1)
    return torch.cat([x[..., :pad, :].flip(-2), x, x[..., -pad:, :].flip(-2)], dim=-2)


def _blockwise_cells(rows: int, cols: int, n_target: int, gen: torch.Generator):
    """Cover n_target cells with random contiguous rectangles, trimming the
    last block's overshoot in row-major order."""
    chosen: list[int] = []
    seen = set()
    for _ in range(200):
        if len(chosen) >= n_target:
            break
        bh = _randint(gen, 1, rows + 1)
        bw = _randint(gen, 1, cols + 1)
        top = _randint(gen, 0, rows - bh + 1)
        left = _randint(gen, 0, cols - bw + 1)
        for r in range(top, top + bh):
            for c in range(left, left + bw):
                idx = r * cols + c
                if idx not in seen:
                    seen.add(idx)
                    chosen.append(idx)
    for idx in range(rows * cols):
        if len(chosen) >= n_target:
            break
        if idx not in seen:
            seen.add(idx)
            chosen.append(idx)
    return chosen[:n_target]


def blur_patches(view: View, ratio: float, mode: str = "random", kernel: int = 5,
                 sigma: float = 3.0, patch_size: int = 16,
                 rng: torch.Generator | None = None) -> View:
    """Blur floor(ratio*N) patch cells of a view, each cell independently.

    Unselected pixels are bit-identical to the input; selected cells get a
    normalized gaussian blur with reflective padding confined to the cell.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0,1]")
    if kernel % 2 != 1:
        raise ValueError("blur kernel must be odd")
    if mode not in ("random", "blockwise"):
        raise ValueError(f"unknown blur mode {mode!r}")
    size = view.pixels.shape[-1]
    if size % patch_size:
        raise ValueError(f"view size {size} not divisible by patch size {patch_size}")
    pad = kernel // 2
    if pad >= patch_size:
        raise ValueError("blur kernel too large for the patch size")

    rows = cols = size // patch_size
    n = rows * cols
    n_sel = int(math.floor(ratio * n))
    if n_sel == 0:
        return replace(view, blur_mask=(), blur_patch_size=patch_size)

    if mode == "random":
        order = torch.randperm(n, generator=rng).tolist()
        selected = order[:n_sel]
    else:
        selected = _blockwise_cells(rows, cols, n_sel, rng)

    pixels = view.pixels.clone()
    c = pixels.shape[0]
    p = patch_size
    cells = torch.stack(
        [pixels[:, (i // cols) * p:(i // cols) * p + p,
                (i % cols) * p:(i % cols) * p + p] for i in selected])
    padded = _pad_symmetric(cells, pad)
    k2 = _gaussian_kernel2d(kernel, sigma, pixels.dtype, pixels.device)
    weight = k2.expand(c, 1, kernel, kernel)
    blurred = F.conv2d(padded, weight, groups=c)
    for j, i in enumerate(selected):
        r0 = (i // cols) * p
        c0 = (i % cols) * p
        pixels[:, r0:r0 + p, c0:c0 + p] = blurred[j]
    return replace(view, pixels=pixels, blur_mask=tuple(sorted(selected)),
                   blur_patch_size=patch_size)
