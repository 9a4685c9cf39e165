"""Candidate-region sampling and cross-attention region encoding.

Regions are axis-aligned rectangles of patch cells. Start patches come
either from uniform sampling or from the per-head argmax of a [CLS]
attention map (ties break to the lowest flat index). Side counts are drawn
uniformly from [min_p, max_p] in both modes; draw order per region is
(start if random mode, n_rows, n_cols) so sequences are replayable.

Out-of-grid rectangles are first shrunk to the grid edge; if that would drop
a side below min_p the start is shifted back instead, which keeps the chosen
start patch inside the region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import AttentionMap, PatchGrid


@dataclass
class RegionConfig:
    m: int = 6
    min_p: int = 2
    max_p: int = 6
    sampler: str = "attention"  # attention | random
    attention_block: int = -1

    def __post_init__(self):
        if self.sampler not in ("attention", "random"):
            raise ValueError(f"unknown region sampler {self.sampler!r}")
        if not 1 <= self.min_p <= self.max_p:
            raise ValueError("need 1 <= min_p <= max_p")


@dataclass(frozen=True)
class Region:
    start_row: int
    start_col: int
    n_rows: int
    n_cols: int
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


def make_region(start_row: int, start_col: int, n_rows: int, n_cols: int,
                grid: PatchGrid) -> Region:
    if (start_row < 0 or start_col < 0 or n_rows < 1 or n_cols < 1
            or start_row + n_rows > grid.rows or start_col + n_cols > grid.cols):
        raise ValueError("region outside grid bounds")
    indices = tuple(grid.flat_index(r, c)
                    for r in range(start_row, start_row + n_rows)
                    for c in range(start_col, start_col + n_cols))
    return Region(start_row, start_col, n_rows, n_cols, indices)


def _fit_span(start: int, size: int, limit: int, min_p: int):
    """Shrink size to the grid edge; shift start back if size falls below min_p."""
    size = min(size, limit - start)
    if size < min_p:
        size = min(min_p, limit)
        start = limit - size
    return start, size


def _randint(gen, lo, hi):
    return int(torch.randint(lo, hi, (), generator=gen).item())


def _check_bounds(grid: PatchGrid, min_p: int, max_p: int):
    if not 1 <= min_p <= max_p:
        raise ValueError(f"invalid side bounds [{min_p}, {max_p}]")
    if max_p > min(grid.rows, grid.cols):
        raise ValueError(
            f"max side {max_p} exceeds grid {grid.rows}x{grid.cols}")


def sample_random_regions(grid: PatchGrid, m: int, min_p: int, max_p: int,
                          rng: torch.Generator) -> list[Region]:
    """m regions with uniform start patch and side counts in [min_p, max_p]."""
    _check_bounds(grid, min_p, max_p)
    out = []
    for _ in range(m):
        start = _randint(rng, 0, grid.n_patches)
        row, col = divmod(start, grid.cols)
        n_rows = _randint(rng, min_p, max_p + 1)
        n_cols = _randint(rng, min_p, max_p + 1)
        row, n_rows = _fit_span(row, n_rows, grid.rows, min_p)
        col, n_cols = _fit_span(col, n_cols, grid.cols, min_p)
        out.append(make_region(row, col, n_rows, n_cols, grid))
    return out


def argmax_patch(weights: torch.Tensor) -> int:
    """Flat index of the maximal weight, lowest index on ties."""
    mx = weights.max()
    return int((weights == mx).nonzero(as_tuple=False)[0].item())


def sample_attention_regions(attn: AttentionMap, grid: PatchGrid, m: int,
                             min_p: int, max_p: int,
                             rng: torch.Generator) -> list[Region]:
    """Start region k at the argmax patch of head k % heads; sizes as random mode."""
    _check_bounds(grid, min_p, max_p)
    if attn.n_heads < 1:
        raise ValueError("attention map has no heads")
    out = []
    for k in range(m):
        head = k % attn.n_heads
        start = argmax_patch(attn.per_head[head])
        row, col = divmod(start, grid.cols)
        n_rows = _randint(rng, min_p, max_p + 1)
        n_cols = _randint(rng, min_p, max_p + 1)
        row, n_rows = _fit_span(row, n_rows, grid.rows, min_p)
        col, n_cols = _fit_span(col, n_cols, grid.cols, min_p)
        out.append(make_region(row, col, n_rows, n_cols, grid))
    return out


class CrossAttention(nn.Module):
    """Single-head cross-attention pooling with scaled dot-product weights.

    out_i = sum_j softmax_j(tau * (q_i Wq) . (k_j Wk)) * (k_j Wv)
    """

    def __init__(self, dim: int, tau: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.tau = tau if tau is not None else 1.0 / math.sqrt(dim)
        with torch.no_grad():
            for lin in (self.w_q, self.w_k, self.w_v):
                lin.weight.normal_(0.0, 0.02, generator=generator)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        q = self.w_q(queries)
        k = self.w_k(keys)
        v = self.w_v(keys)
        weights = (self.tau * q @ k.t()).softmax(dim=-1)
        return weights @ v


def region_context(z_r: torch.Tensor, z_full: torch.Tensor,
                   ca: CrossAttention) -> torch.Tensor:
    """Pool view context into each region token (queries z_r, keys the view)."""
    return ca(z_r, z_full)


def region_share(z_other: torch.Tensor, z_region: torch.Tensor,
                 ca: CrossAttention) -> torch.Tensor | None:
    """Extract region semantics for counterpart tokens; None when the region
    representation is empty (skip signal for the regional loss)."""
    if z_region.shape[0] == 0:
        return None
    return ca(z_other, z_region)
