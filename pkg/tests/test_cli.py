import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from glare.cli import main
from glare.config import RunConfig, load_config, save_config
from glare.data import generate_shapes_dataset

from conftest import TOY_OVERRIDES


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_root = generate_shapes_dataset(root / "data", n_train=8, n_val=4,
                                        size=48, seed=1)
    cfg_path = root / "toy.yaml"
    cfg = load_config(None, list(TOY_OVERRIDES) + ["train.epochs=1"])
    save_config(cfg, cfg_path)
    return root, data_root, cfg_path


def _pretrain(workspace, out_name, extra=()):
    root, data_root, cfg_path = workspace
    out = root / out_name
    rc = main(["pretrain", "--config", str(cfg_path),
               "--data", str(data_root / "train"), "--out", str(out),
               *extra])
    return rc, out


def test_pretrain_smoke_writes_run_dir(workspace, capsys):
    rc, out = _pretrain(workspace, "run1")
    assert rc == 0
    assert (out / "config.yaml").exists()
    assert (out / "ckpt_final.zip").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2  # 8 images / batch 4, 1 epoch
    record = json.loads(lines[0])
    for key in ("step", "lr", "ema_m", "l_glob", "l_reg", "l_loc1", "l_loc2",
                "total", "matched_patches", "active_regions"):
        assert key in record


def test_pretrain_rerun_of_saved_config_is_byte_identical(workspace):
    rc1, out1 = _pretrain(workspace, "run_a")
    root, data_root, _ = workspace
    out2 = root / "run_b"
    # rerun from the resolved copy the first run wrote
    rc2 = main(["pretrain", "--config", str(out1 / "config.yaml"),
                "--data", str(data_root / "train"), "--out", str(out2)])
    assert rc1 == 0 and rc2 == 0
    assert (out1 / "metrics.jsonl").read_bytes() == \
        (out2 / "metrics.jsonl").read_bytes()


def test_pretrain_level_ablation_logs_zeros(workspace):
    rc, out = _pretrain(workspace, "run_ablate",
                        ("--set", "loss.w_reg=0", "--set", "loss.w_loc1=0",
                         "--set", "loss.w_loc2=0"))
    assert rc == 0
    for line in (out / "metrics.jsonl").read_text().splitlines():
        record = json.loads(line)
        assert record["l_reg"] == 0.0
        assert record["l_loc1"] == 0.0
        assert record["l_loc2"] == 0.0
        assert record["total"] == record["l_glob"]


def test_pretrain_unknown_key_fails_fast(workspace, capsys):
    rc, _ = _pretrain(workspace, "run_bad", ("--set", "loss.w_bogus=1"))
    assert rc == 1
    assert "w_bogus" in capsys.readouterr().err


def test_pretrain_missing_data_is_user_error(workspace, capsys):
    root, _, cfg_path = workspace
    rc = main(["pretrain", "--config", str(cfg_path),
               "--data", str(root / "missing"), "--out", str(root / "x")])
    assert rc == 1


def test_run_root_env_var(workspace, monkeypatch):
    root, data_root, cfg_path = workspace
    monkeypatch.setenv("GLARE_RUN_ROOT", str(root / "envroot"))
    rc = main(["pretrain", "--config", str(cfg_path),
               "--data", str(data_root / "train"), "--out", "rel_run"])
    assert rc == 0
    assert (root / "envroot" / "rel_run" / "metrics.jsonl").exists()


def test_probe_report(workspace):
    rc, out = _pretrain(workspace, "run_probe")
    assert rc == 0
    root, data_root, _ = workspace
    report_path = root / "probe.json"
    rc = main(["probe", "--checkpoint", str(out / "ckpt_final.zip"),
               "--data", str(data_root), "--iters", "2", "--seeds", "2",
               "--freeze-adapters", "--out", str(report_path)])
    assert rc == 0
    report = json.loads(report_path.read_text())
    assert len(report["per_seed"]) == 2
    assert "mean_miou" in report and "std_miou" in report

    again = root / "probe2.json"
    rc = main(["probe", "--checkpoint", str(out / "ckpt_final.zip"),
               "--data", str(data_root), "--iters", "2", "--seeds", "2",
               "--freeze-adapters", "--out", str(again)])
    assert rc == 0
    assert report_path.read_text() == again.read_text()


def test_probe_zero_iters_baseline(workspace):
    rc, out = _pretrain(workspace, "run_probe0")
    root, data_root, _ = workspace
    report_path = root / "probe0.json"
    rc = main(["probe", "--checkpoint", str(out / "ckpt_final.zip"),
               "--data", str(data_root), "--iters", "0", "--seeds", "1",
               "--out", str(report_path)])
    assert rc == 0
    assert "per_seed" in json.loads(report_path.read_text())


def test_visualize_attention_and_pca(workspace):
    rc, out = _pretrain(workspace, "run_viz")
    root, data_root, _ = workspace
    image = sorted((data_root / "train" / "images").iterdir())[0]
    viz = root / "viz_attn"
    rc = main(["visualize", "--checkpoint", str(out / "ckpt_final.zip"),
               "--mode", "attention", "--image", str(image),
               "--out", str(viz)])
    assert rc == 0
    pngs = sorted(p.name for p in viz.glob("*.png"))
    assert pngs == ["attention_head0.png", "attention_head1.png",
                    "attention_mean.png"]

    viz2 = root / "viz_pca"
    rc = main(["visualize", "--checkpoint", str(out / "ckpt_final.zip"),
               "--mode", "pca", "--image", str(image), "--out", str(viz2)])
    assert rc == 0
    assert len(list(viz2.glob("*.png"))) == 1


def test_visualize_regions_and_correspondence(workspace):
    rc, out = _pretrain(workspace, "run_viz2")
    root, data_root, _ = workspace
    image = sorted((data_root / "train" / "images").iterdir())[0]

    viz = root / "viz_regions"
    rc = main(["visualize", "--checkpoint", str(out / "ckpt_final.zip"),
               "--mode", "regions", "--image", str(image), "--out", str(viz),
               "--regions-m", "3"])
    assert rc == 0
    regions = json.loads((viz / "regions.json").read_text())
    assert len(regions) == 3
    assert (viz / "regions.png").exists()

    viz2 = root / "viz_corr"
    rc = main(["visualize", "--checkpoint", str(out / "ckpt_final.zip"),
               "--mode", "correspondence", "--image", str(image),
               "--out", str(viz2), "--seed", "4"])
    assert rc == 0
    sidecar = json.loads((viz2 / "correspondence.json").read_text())
    assert (viz2 / "correspondence.png").exists()

    # the sidecar must agree with a fresh match_patches run on its records
    from glare.augment import TransformRecord
    from glare.backbone import PatchGrid
    from glare.correspond import match_patches
    rec_s = TransformRecord(**sidecar["records"][0])
    rec_t = TransformRecord(**sidecar["records"][1])
    grid = PatchGrid(4, 4, 8)
    cmap = match_patches(rec_s, grid, rec_t, grid, sidecar["min_overlap"])
    want = {str(s): sorted(ts) for s, ts in cmap.entries.items()}
    assert sidecar["matches"] == want


def test_inspect_reports_partition_and_absent_adapters(workspace, capsys):
    rc, out = _pretrain(workspace, "run_inspect")
    rc = main(["inspect", "--checkpoint", str(out / "ckpt_final.zip")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "partition: trainable=" in text
    assert "analytic adapter budget: 128" in text  # 2 blocks * 2*8*4

    # source-only archive: backbone tensors only
    from glare.checkpoint import save_archive
    from glare.train import load_encoder
    model, manifest = load_encoder(out / "ckpt_final.zip")
    tensors = {f"backbone.{k}": v for k, v in model.encoder.state_dict().items()
               if not k.startswith("adapters.")}
    root, _, _ = workspace
    source = root / "source_only.zip"
    save_archive(source, tensors, manifest["model"], {})
    rc = main(["inspect", "--checkpoint", str(source)])
    assert rc == 0
    assert "adapters: absent (will initialize)" in capsys.readouterr().out


def test_inspect_truncated_archive_clean_error(workspace, capsys):
    rc, out = _pretrain(workspace, "run_trunc")
    ckpt = out / "ckpt_final.zip"
    data = ckpt.read_bytes()
    broken = out / "broken.zip"
    broken.write_bytes(data[: len(data) // 3])
    rc = main(["inspect", "--checkpoint", str(broken)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
