"""Projection head, teacher centering/sharpening, and the consistency losses.

One projection head is shared by the global, regional, and both local terms.
Teacher targets are always centered, sharpened with the teacher temperature,
and detached; the student side is a log-softmax at the student temperature.
All multi-term losses average over their contributing terms (configurable to
raw sums) so magnitudes stay comparable when the unweighted total is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .regions import CrossAttention, Region, region_context, region_share


@dataclass
class LossConfig:
    w_glob: float = 1.0
    w_reg: float = 1.0
    w_loc1: float = 1.0
    w_loc2: float = 1.0
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    center_momentum: float = 0.9
    min_overlap: float = 0.5
    reduce: str = "mean"  # "mean" | "sum" over contributing terms

    def __post_init__(self):
        for w in (self.w_glob, self.w_reg, self.w_loc1, self.w_loc2):
            if w < 0:
                raise ValueError("loss weights must be non-negative")
        if self.reduce not in ("mean", "sum"):
            raise ValueError(f"unknown reduce mode {self.reduce!r}")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError("center momentum must lie in [0,1)")


@dataclass
class HeadConfig:
    hidden: int = 2048
    bottleneck: int = 256
    out_dim: int = 8192


class ProjectionHead(nn.Module):
    """DINO-style 3-layer MLP with an L2-normalized final projection.

    The last layer keeps unit-norm rows (direction-only parameterization), so
    logits are bounded by the bottleneck embedding norm.
    """

    def __init__(self, in_dim: int, cfg: HeadConfig,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, cfg.hidden)
        self.fc3 = nn.Linear(cfg.hidden, cfg.bottleneck)
        self.last = nn.Parameter(torch.zeros(cfg.out_dim, cfg.bottleneck))
        self.out_dim = cfg.out_dim
        with torch.no_grad():
            for lin in (self.fc1, self.fc2, self.fc3):
                lin.weight.normal_(0.0, 0.02, generator=generator)
                lin.bias.zero_()
            self.last.normal_(0.0, 0.02, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        x = self.fc3(x)
        x = F.normalize(x, dim=-1)
        return x @ F.normalize(self.last, dim=-1).t()


def project(tokens: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    """Project [n, D] tokens to [n, K] logits."""
    return head(tokens)


@dataclass
class CenterState:
    center: torch.Tensor  # [K]
    momentum: float = 0.9

    @staticmethod
    def zeros(out_dim: int, momentum: float = 0.9, dtype=torch.float32) -> "CenterState":
        return CenterState(torch.zeros(out_dim, dtype=dtype), momentum)


def update_center(state: CenterState, teacher_logits: torch.Tensor) -> CenterState:
    """center <- m*center + (1-m)*mean(teacher logits over the batch rows)."""
    if not 0.0 <= state.momentum < 1.0:
        raise ValueError("center momentum must lie in [0,1)")
    batch_mean = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    new = state.momentum * state.center + (1.0 - state.momentum) * batch_mean
    return CenterState(new, state.momentum)


def teacher_probs(teacher_logits: torch.Tensor, center: torch.Tensor,
                  temp_t: float) -> torch.Tensor:
    """Centered, sharpened teacher target distribution (detached)."""
    return F.softmax((teacher_logits.detach() - center) / temp_t, dim=-1)


def soft_ce(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            center: torch.Tensor, temp_s: float, temp_t: float) -> torch.Tensor:
    """Cross-entropy of the student softmax against the teacher target.

    Accepts [K] or [..., K]; reduces only over the class axis.
    """
    if temp_s <= 0 or temp_t <= 0:
        raise ValueError("temperatures must be positive")
    a = teacher_probs(teacher_logits, center, temp_t)
    log_b = F.log_softmax(student_logits / temp_s, dim=-1)
    return -(a * log_b).sum(dim=-1)


def _reduce(terms: torch.Tensor, mode: str) -> torch.Tensor:
    return terms.mean() if mode == "mean" else terms.sum()


def loss_global(student_cls_logits: list[torch.Tensor],
                teacher_cls_logits: list[torch.Tensor],
                center: torch.Tensor, temp_s: float, temp_t: float,
                reduce: str = "mean") -> torch.Tensor:
    """Multi-crop pairing of student [CLS] logits against teacher globals.

    student_cls_logits: per-view [B, K], the first two views being the global
    crops aligned with the two teacher views; same-view pairs are excluded.
    """
    terms = []
    for ti, t_logits in enumerate(teacher_cls_logits):
        for si, s_logits in enumerate(student_cls_logits):
            if si == ti:
                continue
            terms.append(soft_ce(s_logits, t_logits, center, temp_s, temp_t))
    return _reduce(torch.stack(terms), reduce)


def loss_regional(student_patches: torch.Tensor, teacher_patches_own: torch.Tensor,
                  teacher_patches_other: torch.Tensor, regions: list[Region],
                  matched: list[frozenset[int]], ca: CrossAttention,
                  ca_teacher: CrossAttention, head: ProjectionHead,
                  head_teacher: ProjectionHead, center: torch.Tensor,
                  temp_s: float, temp_t: float, reduce: str = "mean"):
    """Regional consistency for one view pair of one image.

    student_patches: [N, D] from the student's view; teacher_patches_own: the
    teacher's encoding of the same view (used as region keys/values on the
    target side); teacher_patches_other: the teacher's other view holding the
    matched region. Regions with no matched counterpart are skipped. Returns
    (loss, active_regions, teacher_logit_rows).
    """
    per_region = []
    t_rows = []
    active = 0
    for region, t_idx in zip(regions, matched):
        if not t_idx:
            continue
        active += 1
        idx = torch.tensor(region.indices, dtype=torch.long,
                           device=student_patches.device)
        z_r = student_patches[idx]
        z_ctx = region_context(z_r, student_patches, ca)
        s_logits = project(z_ctx, head)
        with torch.no_grad():
            t_sel = torch.tensor(sorted(t_idx), dtype=torch.long,
                                 device=student_patches.device)
            z_other = teacher_patches_other[t_sel]
            z_tgt = region_share(z_other, teacher_patches_own[idx], ca_teacher)
            t_logits = project(z_tgt, head_teacher)
        # Every (student token, target token) pair contributes one term.
        pair = soft_ce(s_logits[:, None, :].expand(-1, t_logits.shape[0], -1),
                       t_logits[None, :, :].expand(s_logits.shape[0], -1, -1),
                       center, temp_s, temp_t)
        per_region.append(_reduce(pair.reshape(-1), reduce))
        t_rows.append(t_logits)
    if not per_region:
        zero = torch.zeros((), dtype=student_patches.dtype, device=student_patches.device)
        return zero, 0, torch.zeros(0, head.out_dim, dtype=student_patches.dtype,
                                    device=student_patches.device)
    loss = _reduce(torch.stack(per_region), reduce)
    return loss, active, torch.cat(t_rows)


def loss_local_patchaug(student_patches: torch.Tensor, teacher_patches: torch.Tensor,
                        blur_mask, head: ProjectionHead, head_teacher: ProjectionHead,
                        center: torch.Tensor, temp_s: float, temp_t: float,
                        reduce: str = "mean"):
    """Consistency of blurred-view patch tokens with clean-view tokens at the
    same indices. Returns (loss, n_terms, teacher_logit_rows)."""
    mask = sorted(blur_mask)
    if not mask:
        zero = torch.zeros((), dtype=student_patches.dtype, device=student_patches.device)
        return zero, 0, torch.zeros(0, head.out_dim, dtype=student_patches.dtype,
                                    device=student_patches.device)
    idx = torch.tensor(mask, dtype=torch.long, device=student_patches.device)
    s_logits = project(student_patches[idx], head)
    with torch.no_grad():
        t_logits = project(teacher_patches[idx], head_teacher)
    terms = soft_ce(s_logits, t_logits, center, temp_s, temp_t)
    return _reduce(terms, reduce), len(mask), t_logits


def loss_local_interview(student_patches: torch.Tensor, teacher_patches: torch.Tensor,
                         cmap, head: ProjectionHead, head_teacher: ProjectionHead,
                         center: torch.Tensor, temp_s: float, temp_t: float,
                         reduce: str = "mean"):
    """Consistency of each student patch with its matched teacher patches in
    the other view. Per-patch terms average over that patch's matches, then
    over matched patches. Returns (loss, matched_patches, teacher_logit_rows)."""
    if len(cmap) == 0:
        zero = torch.zeros((), dtype=student_patches.dtype, device=student_patches.device)
        return zero, 0, torch.zeros(0, head.out_dim, dtype=student_patches.dtype,
                                    device=student_patches.device)
    s_list = sorted(cmap.entries)
    t_needed = sorted({t for ts in cmap.entries.values() for t in ts})
    t_pos = {t: i for i, t in enumerate(t_needed)}
    s_idx = torch.tensor(s_list, dtype=torch.long, device=student_patches.device)
    t_idx = torch.tensor(t_needed, dtype=torch.long, device=student_patches.device)
    s_logits = project(student_patches[s_idx], head)
    with torch.no_grad():
        t_logits = project(teacher_patches[t_idx], head_teacher)
    per_patch = []
    for i, s in enumerate(s_list):
        rows = torch.tensor([t_pos[t] for t in sorted(cmap.entries[s])],
                            dtype=torch.long, device=student_patches.device)
        terms = soft_ce(s_logits[i].expand(len(rows), -1), t_logits[rows],
                        center, temp_s, temp_t)
        per_patch.append(_reduce(terms, reduce))
    return _reduce(torch.stack(per_patch), reduce), len(s_list), t_logits


@dataclass
class LossBundle:
    l_glob: float
    l_reg: float
    l_loc1: float
    l_loc2: float
    total: float
    matched_patches: int = 0
    active_regions: int = 0

    def as_dict(self) -> dict:
        return {"l_glob": self.l_glob, "l_reg": self.l_reg,
                "l_loc1": self.l_loc1, "l_loc2": self.l_loc2,
                "total": self.total, "matched_patches": self.matched_patches,
                "active_regions": self.active_regions}


def total_loss(l_glob: torch.Tensor, l_reg: torch.Tensor, l_loc1: torch.Tensor,
               l_loc2: torch.Tensor, cfg: LossConfig,
               matched_patches: int = 0, active_regions: int = 0):
    """Weighted sum of the level losses; weights exist for ablations and
    default to the plain unweighted sum. Returns (tensor, LossBundle)."""
    w_glob = cfg.w_glob * l_glob
    w_reg = cfg.w_reg * l_reg
    w_loc1 = cfg.w_loc1 * l_loc1
    w_loc2 = cfg.w_loc2 * l_loc2
    total = w_glob + w_reg + w_loc1 + w_loc2
    bundle = LossBundle(float(w_glob.detach()), float(w_reg.detach()),
                        float(w_loc1.detach()), float(w_loc2.detach()),
                        float(total.detach()), matched_patches, active_regions)
    return total, bundle
