"""Student-teacher training loop: EMA, schedules, stepping, checkpoints.

The student encoder sees blurred global views plus all local views; the
teacher sees only the clean global views and provides every target. The
teacher's adapter, head, and cross-attention tensors track the student's by
EMA after each optimizer step; both backbones stay frozen and identical.

All randomness is split over dedicated generators (data order, augmentation,
region sampling) so that disabling one pre-training level never shifts the
draws of another. Checkpoints capture parameters, optimizer moments, center,
generator states, and the in-flight epoch permutation, making a resumed run
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .augment import PatchBlurConfig, blur_patches, make_views, sample_blur_ratio
from .backbone import AttentionMap, BackboneConfig, ViTEncoder, set_trainable
from .correspond import match_patches
from .errors import CheckpointError, NumericFault
from .objectives import (CenterState, HeadConfig, LossBundle, LossConfig,
                         ProjectionHead, loss_global, loss_local_interview,
                         loss_local_patchaug, loss_regional, total_loss,
                         update_center)
from .regions import (CrossAttention, RegionConfig, sample_attention_regions,
                      sample_random_regions)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    base_lr: float | None = None  # None -> linear scaling 1.5e-4 * batch/512
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    weight_decay: float = 0.1
    ema_start: float = 0.996
    ema_end: float = 1.0
    clip_grad: float = 3.0  # 0 disables clipping
    adapter_only: bool = True
    log_every: int = 1
    checkpoint_every: int = 0  # steps between checkpoints; 0 -> final only

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")


def resolve_base_lr(cfg: TrainConfig) -> float:
    if cfg.base_lr is not None:
        return cfg.base_lr
    return 1.5e-4 * cfg.batch_size / 512.0


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float,
          min_lr: float) -> float:
    """Linear ramp 0 -> base over warmup, then cosine base -> min_lr with the
    final step landing exactly on min_lr."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def ema_momentum_at(step: int, total_steps: int, start: float, end: float) -> float:
    """Cosine ramp of the teacher momentum from start to end over training."""
    if total_steps <= 0:
        return end
    progress = min(1.0, step / total_steps)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def teacher_temp_at(step: int, steps_per_epoch: int, cfg: LossConfig) -> float:
    warm = cfg.teacher_temp_warmup_epochs * steps_per_epoch
    if warm <= 0 or step >= warm:
        return cfg.teacher_temp_end
    frac = step / warm
    return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start)


def ema_update(student_params, teacher_params, m: float):
    """teacher <- m*teacher + (1-m)*student, elementwise, in place."""
    with torch.no_grad():
        for s, t in zip(student_params, teacher_params, strict=True):
            if s.shape != t.shape:
                raise ValueError(f"EMA shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
            t.mul_(m).add_(s, alpha=1.0 - m)


class GlareModel(nn.Module):
    """Encoder plus the shared projection head and the region cross-attention."""

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.encoder = ViTEncoder(backbone_cfg, generator)
        self.head = ProjectionHead(backbone_cfg.dim, head_cfg, generator)
        self.cross_attention = CrossAttention(backbone_cfg.dim, generator=generator)

    def ema_tensors(self) -> list[torch.Tensor]:
        """Tensors coupled between student and teacher, in a stable order."""
        out = [p for _, p in sorted(self.encoder.adapter_parameters())]
        out += [p for _, p in sorted(self.head.named_parameters())]
        out += [p for _, p in sorted(self.cross_attention.named_parameters())]
        return out


@dataclass
class StepContext:
    """Everything a loss evaluation needs, with all randomness already drawn
    and all teacher-side quantities precomputed as constants."""

    student_globals: list[torch.Tensor]   # 2 x [B,C,S,S], blurred
    student_locals: list[torch.Tensor]    # n_local x [B,C,s,s]
    blur_masks: list[list[tuple[int, ...]]]  # [2][B]
    records: list[list]                   # [B][n_views] TransformRecords
    teacher_cls_logits: list[torch.Tensor]   # 2 x [B,K]
    teacher_patches: list[torch.Tensor]      # 2 x [B,N,D]
    regions: list[list]                   # [B][M] Regions (may be empty)
    region_matches: list[list]            # [B][M] frozensets
    cmaps_01: list                        # [B] CorrespondenceMaps view0->view1
    cmaps_10: list                        # [B]
    temp_t: float


class Trainer:
    """Single-writer training loop over a list/folder of images."""

    def __init__(self, cfg, images, device: str = "cpu"):
        self.cfg = cfg
        self.device = device
        self.images = images
        if len(images) == 0:
            raise ValueError("empty training set")

        init_gen = torch.Generator().manual_seed(cfg.seed)
        self.student = GlareModel(cfg.model, cfg.head, init_gen).to(device)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)

        extra = {"head": self.student.head,
                 "cross_attention": self.student.cross_attention}
        self.trainable, self.frozen = set_trainable(
            self.student.encoder, extra, adapter_only=cfg.train.adapter_only)

        self.optimizer = torch.optim.AdamW(
            self._param_groups(), lr=0.0, weight_decay=cfg.train.weight_decay)
        self.center = CenterState.zeros(cfg.head.out_dim,
                                        cfg.loss.center_momentum)
        self.gen_data = torch.Generator().manual_seed(cfg.seed + 1)
        self.gen_aug = torch.Generator().manual_seed(cfg.seed + 2)
        self.gen_regions = torch.Generator().manual_seed(cfg.seed + 3)

        self.step_count = 0
        self._perm: torch.Tensor | None = None
        self._cursor = 0

        bs = min(cfg.train.batch_size, len(images))
        self.steps_per_epoch = max(1, len(images) // bs)
        self.total_steps = cfg.train.epochs * self.steps_per_epoch
        self.base_lr = resolve_base_lr(cfg.train)
        self.warmup_steps = cfg.train.warmup_epochs * self.steps_per_epoch

    # ---- parameter bookkeeping -------------------------------------------

    def _param_groups(self):
        decay, no_decay = [], []
        for name, p in sorted(self.trainable.items()):
            if p.ndim == 1 or name.endswith(".bias") or "token" in name \
                    or "pos_embed" in name or "norm" in name:
                no_decay.append(p)
            else:
                decay.append(p)
        groups = [{"params": decay, "weight_decay": self.cfg.train.weight_decay}]
        if no_decay:
            groups.append({"params": no_decay, "weight_decay": 0.0})
        return groups

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.trainable.values())

    # ---- data -------------------------------------------------------------

    def _next_batch(self) -> torch.Tensor:
        n = len(self.images)
        bs = min(self.cfg.train.batch_size, n)
        if self._perm is None or self._cursor + bs > n:
            self._perm = torch.randperm(n, generator=self.gen_data)
            self._cursor = 0
        idx = self._perm[self._cursor:self._cursor + bs].tolist()
        self._cursor += bs
        return torch.stack([self.images[i] for i in idx])

    # ---- step pipeline ------------------------------------------------------

    def build_step_context(self, batch: torch.Tensor) -> StepContext:
        cfg = self.cfg
        n_local = cfg.aug.n_local
        per_image_views = [make_views(img, cfg.aug, self.gen_aug) for img in batch]
        records = [[v.record for v in views] for views in per_image_views]

        clean_globals = [
            torch.stack([views[gi].pixels for views in per_image_views])
            for gi in (0, 1)
        ]

        # Patch-blur the student's global views; the teacher keeps them clean.
        blur_masks: list[list[tuple[int, ...]]] = [[], []]
        student_globals = []
        pb: PatchBlurConfig = cfg.patch_blur
        for gi in (0, 1):
            blurred = []
            for views in per_image_views:
                if pb.ratio_mode == "stochastic":
                    ratio = sample_blur_ratio(self.gen_aug)
                else:
                    ratio = pb.fixed_ratio
                view = blur_patches(views[gi], ratio, pb.mode, pb.kernel, pb.sigma,
                                    cfg.model.patch_size, self.gen_aug)
                blurred.append(view.pixels)
                blur_masks[gi].append(view.blur_mask)
            student_globals.append(torch.stack(blurred))
        student_locals = [
            torch.stack([views[2 + li].pixels for views in per_image_views])
            for li in range(n_local)
        ]

        # Teacher side: encode clean globals, project CLS, grab attention.
        want_attention = (cfg.loss.w_reg != 0 and cfg.regions.sampler == "attention")
        with torch.no_grad():
            teacher_cls_logits = []
            teacher_patches = []
            attn0 = None
            for gi in (0, 1):
                block = cfg.regions.attention_block if (gi == 0 and want_attention) else None
                t_cls, _, t_patch, t_attn = self.teacher.encoder(
                    clean_globals[gi], attention_from=block)
                teacher_cls_logits.append(self.teacher.head(t_cls))
                teacher_patches.append(t_patch)
                if gi == 0:
                    attn0 = t_attn

        grid = cfg.model.grid_for(cfg.aug.global_size, cfg.aug.global_size)
        regions: list[list] = []
        region_matches: list[list] = []
        if cfg.loss.w_reg != 0:
            for b in range(batch.shape[0]):
                if cfg.regions.sampler == "attention":
                    amap = AttentionMap(per_head=attn0[b], grid=grid)
                    regs = sample_attention_regions(
                        amap, grid, cfg.regions.m, cfg.regions.min_p,
                        cfg.regions.max_p, self.gen_regions)
                else:
                    regs = sample_random_regions(
                        grid, cfg.regions.m, cfg.regions.min_p,
                        cfg.regions.max_p, self.gen_regions)
                rec0, rec1 = records[b][0], records[b][1]
                cmap = match_patches(rec0, grid, rec1, grid, cfg.loss.min_overlap)
                matches = [frozenset().union(*(cmap.get(s) for s in r.indices))
                           for r in regs]
                regions.append(regs)
                region_matches.append(matches)
        else:
            regions = [[] for _ in range(batch.shape[0])]
            region_matches = [[] for _ in range(batch.shape[0])]

        cmaps_01, cmaps_10 = [], []
        if cfg.loss.w_loc2 != 0:
            for b in range(batch.shape[0]):
                rec0, rec1 = records[b][0], records[b][1]
                cmaps_01.append(match_patches(rec0, grid, rec1, grid,
                                              cfg.loss.min_overlap))
                cmaps_10.append(match_patches(rec1, grid, rec0, grid,
                                              cfg.loss.min_overlap))

        return StepContext(
            student_globals=student_globals, student_locals=student_locals,
            blur_masks=blur_masks, records=records,
            teacher_cls_logits=teacher_cls_logits, teacher_patches=teacher_patches,
            regions=regions, region_matches=region_matches,
            cmaps_01=cmaps_01, cmaps_10=cmaps_10,
            temp_t=teacher_temp_at(self.step_count, self.steps_per_epoch, cfg.loss))

    def compute_losses(self, ctx: StepContext):
        """Evaluate the weighted objective on a prepared context.

        Returns (total tensor, LossBundle, teacher logit rows used as targets).
        """
        cfg = self.cfg
        loss_cfg = cfg.loss
        temp_s, temp_t = loss_cfg.student_temp, ctx.temp_t
        center = self.center.center
        reduce = loss_cfg.reduce
        head, head_t = self.student.head, self.teacher.head
        ca, ca_t = self.student.cross_attention, self.teacher.cross_attention
        zero = torch.zeros((), dtype=ctx.student_globals[0].dtype)
        teacher_rows = [logits for logits in ctx.teacher_cls_logits]

        s_patches = []
        s_cls_logits = []
        need_student_globals = any((loss_cfg.w_glob, loss_cfg.w_reg,
                                    loss_cfg.w_loc1, loss_cfg.w_loc2))
        if need_student_globals:
            for gi in (0, 1):
                cls, _, patches, _ = self.student.encoder(ctx.student_globals[gi])
                if loss_cfg.w_glob != 0:
                    s_cls_logits.append(head(cls))
                s_patches.append(patches)

        l_glob = zero
        if loss_cfg.w_glob != 0:
            for pix in ctx.student_locals:
                cls, _, _, _ = self.student.encoder(pix)
                s_cls_logits.append(head(cls))
            l_glob = loss_global(s_cls_logits, ctx.teacher_cls_logits,
                                 center, temp_s, temp_t, reduce)

        batch_size = ctx.student_globals[0].shape[0]

        l_reg = zero
        active_regions = 0
        if loss_cfg.w_reg != 0:
            per_image = []
            for b in range(batch_size):
                val, active, t_rows = loss_regional(
                    s_patches[0][b], ctx.teacher_patches[0][b],
                    ctx.teacher_patches[1][b], ctx.regions[b],
                    ctx.region_matches[b], ca, ca_t, head, head_t,
                    center, temp_s, temp_t, reduce)
                active_regions += active
                if active:
                    per_image.append(val)
                    teacher_rows.append(t_rows)
            if per_image:
                l_reg = torch.stack(per_image).mean()

        l_loc1 = zero
        if loss_cfg.w_loc1 != 0:
            per_view = []
            for gi in (0, 1):
                for b in range(batch_size):
                    mask = ctx.blur_masks[gi][b]
                    if not mask:
                        continue
                    val, _, t_rows = loss_local_patchaug(
                        s_patches[gi][b], ctx.teacher_patches[gi][b], mask,
                        head, head_t, center, temp_s, temp_t, reduce)
                    per_view.append(val)
                    teacher_rows.append(t_rows)
            if per_view:
                l_loc1 = torch.stack(per_view).mean()

        l_loc2 = zero
        matched = 0
        if loss_cfg.w_loc2 != 0:
            per_pair = []
            for b in range(batch_size):
                for s_idx, t_idx, cmap in ((0, 1, ctx.cmaps_01[b]),
                                           (1, 0, ctx.cmaps_10[b])):
                    if len(cmap) == 0:
                        continue
                    val, n, t_rows = loss_local_interview(
                        s_patches[s_idx][b], ctx.teacher_patches[t_idx][b], cmap,
                        head, head_t, center, temp_s, temp_t, reduce)
                    matched += n
                    per_pair.append(val)
                    teacher_rows.append(t_rows)
            if per_pair:
                l_loc2 = torch.stack(per_pair).mean()

        for name, term in (("global", l_glob), ("regional", l_reg),
                           ("local_patchaug", l_loc1), ("local_interview", l_loc2)):
            if not torch.isfinite(term):
                raise NumericFault(
                    f"non-finite {name} loss at step {self.step_count}: {term}",
                    term=name)

        total, bundle = total_loss(l_glob, l_reg, l_loc1, l_loc2, loss_cfg,
                                   matched_patches=matched,
                                   active_regions=active_regions)
        rows = torch.cat([r.reshape(-1, cfg.head.out_dim) for r in teacher_rows])
        return total, bundle, rows

    def step(self, batch: torch.Tensor | None = None) -> LossBundle:
        if batch is None:
            batch = self._next_batch()
        ctx = self.build_step_context(batch)
        total, bundle, teacher_rows = self.compute_losses(ctx)

        lr = lr_at(self.step_count, self.total_steps, self.warmup_steps,
                   self.base_lr, self.cfg.train.min_lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            if self.cfg.train.clip_grad > 0:
                torch.nn.utils.clip_grad_norm_(self.trainable.values(),
                                               self.cfg.train.clip_grad)
            self.optimizer.step()

        m = ema_momentum_at(self.step_count, self.total_steps,
                            self.cfg.train.ema_start, self.cfg.train.ema_end)
        ema_update(self.student.ema_tensors(), self.teacher.ema_tensors(), m)
        if teacher_rows.shape[0]:
            self.center = update_center(self.center, teacher_rows)
        self.step_count += 1
        self._last_lr = lr
        self._last_m = m
        return bundle

    def train(self, n_steps: int | None = None, run_dir=None, log=None):
        """Run n_steps (default: the full schedule), logging JSONL metrics."""
        n_steps = self.total_steps - self.step_count if n_steps is None else n_steps
        run_dir = Path(run_dir) if run_dir is not None else None
        metrics_path = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = run_dir / "metrics.jsonl"
        for _ in range(n_steps):
            bundle = self.step()
            record = {"step": self.step_count, "lr": self._last_lr,
                      "ema_m": self._last_m}
            record.update(bundle.as_dict())
            if metrics_path is not None and \
                    self.step_count % self.cfg.train.log_every == 0:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
            every = self.cfg.train.checkpoint_every
            if run_dir is not None and every and self.step_count % every == 0:
                self.save_checkpoint(run_dir / f"ckpt_step{self.step_count:06d}.zip")
        if run_dir is not None:
            self.save_checkpoint(run_dir / "ckpt_final.zip")
        return metrics_path

    # ---- checkpointing -----------------------------------------------------

    def _model_meta(self) -> dict:
        return {"backbone": asdict(self.cfg.model), "head": asdict(self.cfg.head)}

    def save_checkpoint(self, path):
        tensors: dict[str, torch.Tensor | np.ndarray] = {}
        for name, p in self.student.encoder.state_dict().items():
            group = "adapters" if name.startswith("adapters.") else "backbone"
            key = name[len("adapters."):] if group == "adapters" else name
            tensors[f"{group}.{key}"] = p
        tensors.update(ckpt.state_dict_tensors("head", self.student.head))
        tensors.update(ckpt.state_dict_tensors("cross_attention",
                                               self.student.cross_attention))
        for name, p in self.teacher.encoder.state_dict().items():
            if name.startswith("adapters."):
                tensors[f"teacher_adapters.{name[len('adapters.'):]}"] = p
        tensors.update(ckpt.state_dict_tensors("teacher_head", self.teacher.head))
        tensors.update(ckpt.state_dict_tensors("teacher_cross_attention",
                                               self.teacher.cross_attention))
        tensors["center"] = self.center.center

        opt_state = self.optimizer.state_dict()["state"]
        for idx, state in opt_state.items():
            for key, val in state.items():
                arr = val if isinstance(val, torch.Tensor) else torch.tensor(val)
                tensors[f"opt.{idx}.{key}"] = arr
        tensors["rng.data"] = self.gen_data.get_state()
        tensors["rng.aug"] = self.gen_aug.get_state()
        tensors["rng.regions"] = self.gen_regions.get_state()
        if self._perm is not None:
            tensors["data.perm"] = self._perm
        extra = {
            "step": self.step_count,
            "cursor": self._cursor,
            "config": self.cfg.to_dict() if hasattr(self.cfg, "to_dict") else {},
            "trainable": sorted(self.trainable),
        }
        ckpt.save_archive(path, tensors, self._model_meta(), extra)

    def load_checkpoint(self, path):
        manifest, tensors = ckpt.load_archive(path)
        self._load_model_tensors(self.student, self.teacher, tensors)
        if "center" in tensors:
            self.center = CenterState(torch.from_numpy(tensors["center"].copy()),
                                      self.cfg.loss.center_momentum)
        opt_state = self.optimizer.state_dict()
        restored = {}
        for name, arr in tensors.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            entry = restored.setdefault(int(idx), {})
            t = torch.from_numpy(arr.copy())
            entry[key] = t.reshape(()) if key == "step" and t.ndim == 0 else t
        opt_state["state"] = restored
        self.optimizer.load_state_dict(opt_state)
        for gen, key in ((self.gen_data, "rng.data"), (self.gen_aug, "rng.aug"),
                         (self.gen_regions, "rng.regions")):
            if key in tensors:
                gen.set_state(torch.from_numpy(tensors[key].copy()))
        self._perm = (torch.from_numpy(tensors["data.perm"].copy())
                      if "data.perm" in tensors else None)
        self.step_count = int(manifest["extra"].get("step", 0))
        self._cursor = int(manifest["extra"].get("cursor", 0))

    @staticmethod
    def _load_model_tensors(student: GlareModel, teacher: GlareModel, tensors):
        """Fill student/teacher modules from archive groups; groups that are
        absent (adapters/head/cross-attention of a source-only checkpoint)
        keep their fresh initialization, with the teacher mirroring the
        student so EMA starts from equality."""
        enc_state = {}
        for name, arr in tensors.items():
            if name.startswith("backbone."):
                enc_state[name[len("backbone."):]] = torch.from_numpy(arr.copy())
            elif name.startswith("adapters."):
                enc_state[name] = torch.from_numpy(arr.copy())
        if not any(k for k in enc_state if not k.startswith("adapters.")):
            raise CheckpointError("checkpoint holds no backbone tensors")
        has_adapters = ckpt.has_group(tensors, "adapters")
        if not has_adapters:
            for name, p in student.encoder.state_dict().items():
                if name.startswith("adapters."):
                    enc_state[name] = p.clone()
        student.encoder.load_state_dict(enc_state, strict=True)
        for group, module in (("head", student.head),
                              ("cross_attention", student.cross_attention)):
            if ckpt.has_group(tensors, group):
                ckpt.load_into(module, group, tensors)
        # Teacher: same backbone; EMA groups from their own tensors if stored.
        teacher_enc = dict(enc_state)
        if ckpt.has_group(tensors, "teacher_adapters"):
            for name, arr in tensors.items():
                if name.startswith("teacher_adapters."):
                    key = "adapters." + name[len("teacher_adapters."):]
                    teacher_enc[key] = torch.from_numpy(arr.copy())
        teacher.encoder.load_state_dict(teacher_enc, strict=True)
        for group, module in (("teacher_head", teacher.head),
                              ("teacher_cross_attention", teacher.cross_attention)):
            if ckpt.has_group(tensors, group):
                ckpt.load_into(module, group, tensors)
            else:
                src = student.head if group == "teacher_head" else student.cross_attention
                module.load_state_dict(src.state_dict())

    @classmethod
    def from_checkpoint(cls, path, cfg, images, device: str = "cpu") -> "Trainer":
        """Resume or seed a trainer from an archive. Full training archives
        restore optimizer/center/rng state; source-only archives just seed
        the encoder weights."""
        trainer = cls(cfg, images, device)
        manifest, tensors = ckpt.load_archive(path)
        is_training_ckpt = any(n.startswith("opt.") or n == "center"
                               for n in tensors)
        if is_training_ckpt:
            trainer.load_checkpoint(path)
        else:
            cls._load_model_tensors(trainer.student, trainer.teacher, tensors)
        return trainer


def load_encoder(path, use_teacher_adapters: bool = False):
    """Build an encoder (and head config) from an archive for evaluation."""
    manifest, tensors = ckpt.load_archive(path)
    bcfg = BackboneConfig(**manifest["model"]["backbone"])
    hcfg = HeadConfig(**manifest["model"]["head"])
    model = GlareModel(bcfg, hcfg, torch.Generator().manual_seed(0))
    Trainer._load_model_tensors(model, copy.deepcopy(model), tensors)
    if use_teacher_adapters and ckpt.has_group(tensors, "teacher_adapters"):
        state = model.encoder.state_dict()
        for name, arr in tensors.items():
            if name.startswith("teacher_adapters."):
                key = "adapters." + name[len("teacher_adapters."):]
                state[key] = torch.from_numpy(arr.copy())
        model.encoder.load_state_dict(state)
    for p in model.parameters():
        p.requires_grad_(False)
    return model, manifest
