"""ViT encoder with bottleneck adapters after each attention layer.

The backbone (patch projection, positional embeddings, transformer blocks,
[CLS] and register tokens) stays frozen during continual pre-training; the
per-block adapters are the only trainable encoder parameters. Adapters start
as exact identities (zero up-projection), so a freshly adapted encoder
reproduces the source model bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericFault


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of the non-overlapping patch tiling of one view."""

    rows: int
    cols: int
    patch_size: int
    channels: int = 3

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0 or self.patch_size <= 0:
            raise ValueError(f"invalid grid {self.rows}x{self.cols} P={self.patch_size}")

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def height(self) -> int:
        return self.rows * self.patch_size

    @property
    def width(self) -> int:
        return self.cols * self.patch_size

    def flat_index(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass
class TokenBatch:
    """Final-layer representations of a single view."""

    cls: torch.Tensor        # [D]
    registers: torch.Tensor  # [n_reg, D]
    patches: torch.Tensor    # [N, D]
    grid: PatchGrid


@dataclass
class AttentionMap:
    """[CLS]-query attention over patch keys, one row per head.

    Rows are renormalized over patch keys only, so each row is a proper
    probability distribution regardless of how much mass the raw softmax
    assigned to the [CLS]/register columns.
    """

    per_head: torch.Tensor  # [heads, N]
    grid: PatchGrid

    @property
    def n_heads(self) -> int:
        return int(self.per_head.shape[0])


@dataclass
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    n_registers: int = 1
    adapter_dim: int = 64
    adapter_scale: float = 1.0
    # "attention": adapt the attention output before its residual is added;
    # "block": adapt the full block output after the MLP residual.
    adapter_position: str = "attention"

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.adapter_dim >= self.dim:
            raise ValueError("adapter bottleneck must be smaller than dim")
        if self.adapter_scale <= 0:
            raise ValueError("adapter scale must be positive")
        if self.adapter_position not in ("attention", "block"):
            raise ValueError(f"unknown adapter_position {self.adapter_position!r}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    def grid_for(self, height: int, width: int) -> PatchGrid:
        if height % self.patch_size or width % self.patch_size:
            raise ValueError(
                f"view {height}x{width} not divisible by patch size {self.patch_size}"
            )
        return PatchGrid(height // self.patch_size, width // self.patch_size,
                         self.patch_size, self.channels)


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split [C,H,W] into row-major flattened patches, shape [N, C*P*P]."""
    if image.ndim != 3:
        raise ValueError(f"expected [C,H,W], got shape {tuple(image.shape)}")
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return _patchify_batch(image.unsqueeze(0), patch_size).squeeze(0)


def _patchify_batch(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)  # [B, gh, gw, C, P, P]
    return x.reshape(b, (h // p) * (w // p), c * p * p)


class Adapter(nn.Module):
    """Residual bottleneck: x + s * relu(x W_down) W_up."""

    def __init__(self, dim: int, bottleneck: int, scale: float = 1.0,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck, bias=False)
        self.up = nn.Linear(bottleneck, dim, bias=False)
        self.scale = scale
        with torch.no_grad():
            self.down.weight.normal_(0.0, 0.02, generator=generator)
            self.up.weight.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.scale * self.up(F.relu(self.down(x)))


def adapter_forward(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    """Functional alias for the adapter residual map."""
    return adapter(x)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each [B, heads, T, hd]
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if need_weights:
            return out, logits
        return out, None


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, adapter=None, adapter_position="attention", need_weights=False):
        h, logits = self.attn(self.norm1(x), need_weights=need_weights)
        if adapter is not None and adapter_position == "attention":
            h = adapter(h)
        x = x + h
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        if adapter is not None and adapter_position == "block":
            x = adapter(x)
        return x, logits


class ViTEncoder(nn.Module):
    """Patch-token transformer with one adapter per block.

    Backbone parameters live directly on this module and its blocks; the
    adapters sit in ``self.adapters`` so trainable/frozen partitioning can
    separate them by name.
    """

    def __init__(self, cfg: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        n = cfg.grid_side * cfg.grid_side
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch_size ** 2, d, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_tokens = nn.Parameter(torch.zeros(1, cfg.n_registers, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.n_registers + n, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.adapters = nn.ModuleList(
            Adapter(d, cfg.adapter_dim, cfg.adapter_scale, generator)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        self._init_backbone(generator)

    def _init_backbone(self, generator):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("adapters."):
                    continue
                if p.ndim > 1:
                    p.normal_(0.0, 0.02, generator=generator)
                else:
                    p.zero_()
            for blk in self.blocks:
                blk.norm1.weight.fill_(1.0)
                blk.norm2.weight.fill_(1.0)
            self.norm.weight.fill_(1.0)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def backbone_parameters(self):
        """Named parameters excluding adapters (the frozen set)."""
        for name, p in self.named_parameters():
            if not name.startswith("adapters."):
                yield name, p

    def adapter_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("adapters."):
                yield name, p

    def _pos_for_grid(self, grid: PatchGrid) -> torch.Tensor:
        side = self.cfg.grid_side
        n_fixed = 1 + self.cfg.n_registers
        pos = self.pos_embed
        if grid.rows == side and grid.cols == side:
            return pos
        patch_pos = pos[:, n_fixed:, :].reshape(1, side, side, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid.rows, grid.cols),
                                  mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid.rows * grid.cols, -1)
        return torch.cat([pos[:, :n_fixed, :], patch_pos], dim=1)

    def forward(self, images: torch.Tensor, use_adapters: bool = True,
                attention_from: int | None = None):
        """Encode a batch of [B,C,S,S] views.

        Returns (cls [B,D], registers [B,n_reg,D], patches [B,N,D], attn),
        where attn is the renormalized [CLS]->patch attention [B,heads,N]
        of block ``attention_from`` (None to skip collection).
        """
        if images.ndim != 4:
            raise ValueError(f"expected [B,C,H,W], got {tuple(images.shape)}")
        b, c, h, w = images.shape
        grid = self.cfg.grid_for(h, w)
        n_fixed = 1 + self.cfg.n_registers

        collect = None
        if attention_from is not None:
            if not -self.depth <= attention_from < self.depth:
                raise ValueError(f"block index {attention_from} out of range")
            collect = attention_from % self.depth

        x = self.patch_embed(_patchify_batch(images, self.cfg.patch_size))
        tokens = torch.cat(
            [self.cls_token.expand(b, -1, -1),
             self.register_tokens.expand(b, -1, -1), x], dim=1)
        x = tokens + self._pos_for_grid(grid)

        attn_out = None
        for i, blk in enumerate(self.blocks):
            adapter = self.adapters[i] if use_adapters else None
            x, logits = blk(x, adapter, self.cfg.adapter_position,
                            need_weights=(collect == i))
            if not torch.isfinite(x).all():
                raise NumericFault(f"non-finite activations in block {i}", block=i)
            if collect == i:
                # [CLS] query row, patch key columns only, renormalized.
                cls_logits = logits[:, :, 0, n_fixed:]
                attn_out = cls_logits.softmax(dim=-1)
        x = self.norm(x)
        cls = x[:, 0, :]
        registers = x[:, 1:n_fixed, :]
        patches = x[:, n_fixed:, :]
        return cls, registers, patches, attn_out

    def grid_of(self, images: torch.Tensor) -> PatchGrid:
        return self.cfg.grid_for(images.shape[-2], images.shape[-1])


def encode(view, encoder: ViTEncoder, use_adapters: bool = True) -> TokenBatch:
    """Encode one view (a View object or raw [C,S,S] tensor) into a TokenBatch."""
    pixels = view.pixels if hasattr(view, "pixels") else view
    cls, regs, patches, _ = encoder(pixels.unsqueeze(0), use_adapters=use_adapters)
    grid = encoder.grid_of(pixels.unsqueeze(0))
    return TokenBatch(cls=cls[0], registers=regs[0], patches=patches[0], grid=grid)


def extract_attention(view, encoder: ViTEncoder, block_index: int = -1,
                      use_adapters: bool = True) -> AttentionMap:
    """[CLS]->patch attention of one block for a single view."""
    pixels = view.pixels if hasattr(view, "pixels") else view
    _, _, _, attn = encoder(pixels.unsqueeze(0), use_adapters=use_adapters,
                            attention_from=block_index)
    return AttentionMap(per_head=attn[0], grid=encoder.grid_of(pixels.unsqueeze(0)))


def set_trainable(encoder: ViTEncoder, extra: dict[str, nn.Module] | None = None,
                  adapter_only: bool = True):
    """Partition parameters into (trainable, frozen) dicts and set requires_grad.

    With adapter_only, trainable = encoder adapters plus everything in
    ``extra`` (projection head, cross-attention); frozen = the backbone.
    With adapter_only=False everything is trainable (from-scratch baseline).
    """
    extra = extra or {}
    trainable: dict[str, torch.Tensor] = {}
    frozen: dict[str, torch.Tensor] = {}
    for name, p in encoder.named_parameters():
        is_adapter = name.startswith("adapters.")
        if adapter_only and not is_adapter:
            frozen[f"encoder.{name}"] = p
        else:
            trainable[f"encoder.{name}"] = p
    for mod_name, module in extra.items():
        for name, p in module.named_parameters():
            trainable[f"{mod_name}.{name}"] = p
    for p in trainable.values():
        p.requires_grad_(True)
    for p in frozen.values():
        p.requires_grad_(False)
    return trainable, frozen


def adapter_parameter_count(cfg: BackboneConfig) -> int:
    """Analytic adapter budget: depth * 2 * dim * bottleneck (no biases)."""
    return cfg.depth * 2 * cfg.dim * cfg.adapter_dim
