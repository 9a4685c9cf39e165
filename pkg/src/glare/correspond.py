"""Patch and region correspondence by inverting view geometry.

Patches of two views of the same source image are matched by mapping each
patch cell back to the source-pixel rectangle it was cropped from and
thresholding rectangle overlap. Crop boxes have integer pixel coordinates
and every patch edge is a multiple of crop_extent/grid_side, so the whole
computation runs in exactly scaled integer coordinates: a teacher patch t
matches student patch s iff

    area(box_s & box_t) >= min_overlap * area(box_s)

with areas evaluated as exact integers (normalization is by the student
patch's area). No rasterization happens here; only the test-suite oracle
rasterizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .augment import TransformRecord
from .backbone import PatchGrid


@dataclass
class CorrespondenceMap:
    """student patch index -> matching teacher patch indices (non-empty sets)."""

    entries: dict[int, frozenset[int]]

    def __len__(self) -> int:
        return len(self.entries)

    def total_matches(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def get(self, s: int) -> frozenset[int]:
        return self.entries.get(s, frozenset())


def patch_source_box(idx: int, record: TransformRecord, grid: PatchGrid):
    """Source-image rectangle (x, y, w, h) covered by patch ``idx``."""
    if not 0 <= idx < grid.n_patches:
        raise ValueError(f"patch index {idx} outside grid of {grid.n_patches}")
    row, col = divmod(idx, grid.cols)
    if record.flipped:
        col = grid.cols - 1 - col
    sx = record.crop_w / record.out_size
    sy = record.crop_h / record.out_size
    p = grid.patch_size
    return (record.crop_x + col * p * sx,
            record.crop_y + row * p * sy,
            p * sx, p * sy)


def _scaled_intervals(record: TransformRecord, grid: PatchGrid,
                      mult_x: int, mult_y: int):
    """Integer (start, end) source intervals per patch column/row.

    ``mult_x`` must be a multiple of grid.cols (and mult_y of grid.rows) so
    that crop_w * mult_x / cols stays integral.
    """
    cols = np.arange(grid.cols)
    if record.flipped:
        cols = grid.cols - 1 - cols
    step_x = record.crop_w * (mult_x // grid.cols)
    x0 = record.crop_x * mult_x + cols * step_x
    rows_idx = np.arange(grid.rows)
    step_y = record.crop_h * (mult_y // grid.rows)
    y0 = record.crop_y * mult_y + rows_idx * step_y
    return (x0.astype(np.int64), (x0 + step_x).astype(np.int64),
            y0.astype(np.int64), (y0 + step_y).astype(np.int64))


def _overlap_matrix(rec_s, grid_s, rec_t, grid_t):
    """Pairwise intersection areas in exact scaled-integer units.

    Returns (areas[s_row, s_col, t_row, t_col], student patch area) with both
    sides in the same units.
    """
    mult_x = math.lcm(grid_s.cols, grid_t.cols)
    mult_y = math.lcm(grid_s.rows, grid_t.rows)
    sx0, sx1, sy0, sy1 = _scaled_intervals(rec_s, grid_s, mult_x, mult_y)
    tx0, tx1, ty0, ty1 = _scaled_intervals(rec_t, grid_t, mult_x, mult_y)
    ox = np.minimum(sx1[:, None], tx1[None, :]) - np.maximum(sx0[:, None], tx0[None, :])
    oy = np.minimum(sy1[:, None], ty1[None, :]) - np.maximum(sy0[:, None], ty0[None, :])
    np.clip(ox, 0, None, out=ox)
    np.clip(oy, 0, None, out=oy)
    areas = oy[:, None, :, None] * ox[None, :, None, :]
    s_area = int(sx1[0] - sx0[0]) * int(sy1[0] - sy0[0])
    return areas, s_area


def match_patches(rec_s: TransformRecord, grid_s: PatchGrid,
                  rec_t: TransformRecord, grid_t: PatchGrid,
                  min_overlap: float = 0.5) -> CorrespondenceMap:
    """Match each student patch to the teacher patches covering enough of it."""
    areas, s_area = _overlap_matrix(rec_s, grid_s, rec_t, grid_t)
    hits = areas >= min_overlap * s_area
    entries: dict[int, frozenset[int]] = {}
    flat = hits.reshape(grid_s.n_patches, grid_t.n_patches)
    for s in np.flatnonzero(flat.any(axis=1)):
        entries[int(s)] = frozenset(int(t) for t in np.flatnonzero(flat[s]))
    return CorrespondenceMap(entries)


def match_region(indices, rec_s: TransformRecord, grid_s: PatchGrid,
                 rec_t: TransformRecord, grid_t: PatchGrid,
                 min_overlap: float = 0.5) -> frozenset[int]:
    """Union of per-patch matches over a set of student patch indices.

    An empty result means the region has no counterpart in the teacher view
    and should be skipped by the regional objective.
    """
    cmap = match_patches(rec_s, grid_s, rec_t, grid_t, min_overlap)
    out: set[int] = set()
    for s in indices:
        out |= cmap.get(int(s))
    return frozenset(out)
