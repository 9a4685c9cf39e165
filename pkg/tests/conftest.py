import pytest
import torch

from glare.backbone import BackboneConfig, ViTEncoder
from glare.config import load_config

TOY_OVERRIDES = [
    "model.image_size=32", "model.patch_size=8", "model.dim=8",
    "model.depth=2", "model.heads=2", "model.adapter_dim=4",
    "head.hidden=16", "head.bottleneck=8", "head.out_dim=16",
    "aug.global_size=32", "aug.local_size=16", "aug.n_local=2",
    "regions.m=2", "regions.min_p=1", "regions.max_p=2",
    "loss.teacher_temp_warmup_epochs=1",
    "train.epochs=2", "train.batch_size=4", "train.base_lr=0.005",
    "train.warmup_epochs=1",
]


@pytest.fixture
def toy_cfg():
    return load_config(None, list(TOY_OVERRIDES))


def toy_run_config(extra=()):
    return load_config(None, list(TOY_OVERRIDES) + list(extra))


@pytest.fixture
def toy_backbone_cfg():
    return BackboneConfig(image_size=32, patch_size=8, dim=8, depth=2, heads=2,
                          adapter_dim=4)


@pytest.fixture
def toy_encoder(toy_backbone_cfg):
    gen = torch.Generator().manual_seed(7)
    enc = ViTEncoder(toy_backbone_cfg, gen)
    # Non-zero up-projections so the adapters actually do something in tests.
    with torch.no_grad():
        for adapter in enc.adapters:
            adapter.up.weight.normal_(0.0, 0.05, generator=gen)
    return enc


def rand_images(n, size=48, channels=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.rand(channels, size, size, generator=gen) for _ in range(n)]
