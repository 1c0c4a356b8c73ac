import json
from pathlib import Path

import numpy as np
import pytest

from treediff.checkpoint import load_checkpoint
from treediff.cli import main
from treediff.evaluation import MetricsReport

TINY_CONFIG = """
seed: 3
data:
  resolution: 8
  synthetic:
    num_clusters: 4
    image_size: 8
    patterns: [disk, cross, checker, square]
    noise_std: 0.05
    samples_per_cluster: 16
tree:
  max_depth: 2
  max_leaves: 3
  latent_channels: 2
  repr_size: 2
  bottom_up_channels: 4
tree_train:
  initial_epochs: 1
  smalltree_epochs: 1
  intermediate_epochs: 1
  finetune_epochs: 0
diffusion:
  steps: 10
  base_channels: 8
  channel_multipliers: [1, 2]
  epochs: 1
  anneal_steps: 4
eval:
  classifier_epochs: 2
  fid_samples: 24
  ddim_steps: 3
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "config.yaml"
    cfg.write_text(TINY_CONFIG)
    return tmp_path, cfg


def _run(tmp_path, cfg, *args):
    return main(["--config", str(cfg), "--runs-dir", str(tmp_path / "runs"), *args])


def test_train_tree_epochs_zero_saves_initialized_model(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "r0", "train-tree", "--epochs", "0") == 0
    ckpt = tmp_path / "runs" / "r0" / "checkpoints" / "tree.npz"
    arrays, manifest = load_checkpoint(ckpt)
    assert manifest["stage"] == "tree"
    assert manifest["step"] == 0
    assert len(manifest["topology"]) == 3  # root plus two fresh leaves


def test_rerun_fails_fast_then_force(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "r1", "train-tree", "--epochs", "0") == 0
    assert _run(tmp_path, cfg, "--run-id", "r1", "train-tree", "--epochs", "0") == 3
    assert _run(tmp_path, cfg, "--run-id", "r1", "--force", "train-tree", "--epochs", "0") == 0


def test_train_tree_deterministic_checkpoint(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "a", "train-tree") == 0
    assert _run(tmp_path, cfg, "--run-id", "b", "train-tree") == 0
    a, ma = load_checkpoint(tmp_path / "runs" / "a" / "checkpoints" / "tree.npz")
    b, mb = load_checkpoint(tmp_path / "runs" / "b" / "checkpoints" / "tree.npz")
    assert ma["state_hash"] == mb["state_hash"]
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    history = (tmp_path / "runs" / "a" / "tree_history.csv").read_text().splitlines()
    assert history[0] == "epoch,phase,rec,kl_root,kl_nodes,kl_decisions,total"
    growth = [json.loads(l) for l in (tmp_path / "runs" / "a" / "growth_log.jsonl").read_text().splitlines()]
    assert growth[-1]["event"] == "prune"


def test_unknown_variant_is_usage_error(workdir):
    tmp_path, cfg = workdir
    with pytest.raises(SystemExit) as err:
        _run(tmp_path, cfg, "train-diffusion", "--tree-ckpt", "x.npz", "--variant", "bogus")
    assert err.value.code == 2


def test_full_cli_pipeline(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "full", "train-tree") == 0
    tree_ckpt = str(tmp_path / "runs" / "full" / "checkpoints" / "tree.npz")

    assert _run(tmp_path, cfg, "--run-id", "full", "train-diffusion", "--tree-ckpt", tree_ckpt, "--variant", "recon+path") == 0
    den_ckpt = str(tmp_path / "runs" / "full" / "checkpoints" / "denoiser-recon+path.npz")
    _, manifest = load_checkpoint(den_ckpt)
    assert manifest["variant"] == "recon+path"
    assert "tree_state_hash" in manifest

    assert _run(
        tmp_path, cfg, "--run-id", "full", "sample",
        "--tree-ckpt", tree_ckpt, "--denoiser-ckpt", den_ckpt, "--n", "5", "--steps", "3",
    ) == 0
    samples = tmp_path / "runs" / "full" / "samples"
    manifest_lines = (samples / "manifest.jsonl").read_text().splitlines()
    assert len(manifest_lines) == 5
    first = json.loads(manifest_lines[0])
    assert (samples / first["image"]).exists()

    assert _run(
        tmp_path, cfg, "--run-id", "full", "--force", "sample",
        "--tree-ckpt", tree_ckpt, "--denoiser-ckpt", den_ckpt, "--all-leaves", "--grids", "2", "--steps", "3",
    ) == 0
    assert (samples / "all_leaves_grid.png").exists()

    assert _run(
        tmp_path, cfg, "--run-id", "full", "evaluate",
        "--tree-ckpt", tree_ckpt, "--denoiser-ckpt", den_ckpt, "--specificity-samples", "6",
    ) == 0
    report = MetricsReport.from_json((tmp_path / "runs" / "full" / "metrics_report.json").read_text())
    assert 0.0 <= report.acc <= 1.0
    assert 0.0 <= report.nmi <= 1.0
    assert report.fid_rec >= 0.0 and report.fid_gen >= 0.0
    assert (tmp_path / "runs" / "full" / "leaf_entropies.csv").exists()

    run_manifest = json.loads((tmp_path / "runs" / "full" / "run_manifest.json").read_text())
    assert set(run_manifest["stages"]) >= {"tree", "diffusion-recon+path", "sample", "evaluate"}
    for stage in run_manifest["stages"].values():
        assert stage["seconds"] >= 0


def test_diffusion_rejects_mismatched_config(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "m", "train-tree", "--epochs", "0") == 0
    tree_ckpt = str(tmp_path / "runs" / "m" / "checkpoints" / "tree.npz")
    other_cfg = tmp_path / "other.yaml"
    other_cfg.write_text(TINY_CONFIG.replace("steps: 10", "steps: 12"))
    code = main([
        "--config", str(other_cfg), "--runs-dir", str(tmp_path / "runs"), "--run-id", "m",
        "train-diffusion", "--tree-ckpt", tree_ckpt,
    ])
    assert code == 3


def test_evaluate_without_denoiser_is_baseline(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "base", "train-tree") == 0
    tree_ckpt = str(tmp_path / "runs" / "base" / "checkpoints" / "tree.npz")
    assert _run(tmp_path, cfg, "--run-id", "base", "evaluate", "--tree-ckpt", tree_ckpt, "--specificity-samples", "4") == 0
    report = MetricsReport.from_json((tmp_path / "runs" / "base" / "metrics_report.json").read_text())
    report.validate()


def test_ablate_table_sorted_with_unconditional(workdir):
    tmp_path, cfg = workdir
    assert _run(tmp_path, cfg, "--run-id", "ab", "train-tree") == 0
    tree_ckpt = str(tmp_path / "runs" / "ab" / "checkpoints" / "tree.npz")
    assert _run(
        tmp_path, cfg, "--run-id", "ab", "ablate", "--tree-ckpt", tree_ckpt, "--variants", "recon,path"
    ) == 0
    lines = (tmp_path / "runs" / "ab" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,fid_mean,fid_std,per_seed"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 3  # recon, path, plus the forced unconditional baseline
    assert {r[0] for r in rows} == {"recon", "path", "unconditional"}
    scores = [float(r[1]) for r in rows]
    assert scores == sorted(scores)


def test_missing_config_is_validation_error(tmp_path):
    code = main(["--config", str(tmp_path / "nope.yaml"), "train-tree"])
    assert code == 3


def test_runs_dir_env_var(workdir, monkeypatch):
    tmp_path, cfg = workdir
    monkeypatch.setenv("TREEDIFF_RUNS_DIR", str(tmp_path / "alt"))
    assert main(["--config", str(cfg), "--run-id", "env", "train-tree", "--epochs", "0"]) == 0
    assert (tmp_path / "alt" / "env" / "checkpoints" / "tree.npz").exists()
