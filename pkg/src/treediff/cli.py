"""Command-line entry points for the two training stages, sampling, and
evaluation. Artifacts land under ``runs/<run-id>/`` (override the root with
``TREEDIFF_RUNS_DIR``); commands fail fast on an already-used run id unless
``--force`` is given.

Exit codes: 0 ok, 2 usage, 3 validation/configuration, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import tree_train
from .conditioning import parse_variant
from .config import ExperimentConfig, Rng, config_from_dict, load_config, seed_all
from .data import load_dataset
from .diffusion.schedule import make_linear_schedule
from .diffusion.training import EmaTracker, check_tree_compatibility, train_diffusion
from .diffusion.unet import build_denoiser
from .errors import (
    CompatibilityError,
    ConfigError,
    IntegrityError,
    NumericError,
    TreediffError,
    ValidationError,
)
from .evaluation import (
    MetricsReport,
    cluster_accuracy,
    extract_features,
    frechet_distance,
    leaf_specificity,
    nmi,
    train_feature_extractor,
)
from .pipeline import (
    SamplerOptions,
    generate,
    generate_all_leaves,
    reconstruct_refined,
    save_image,
    save_image_grid,
    write_generation_manifest,
)
from .tree.model import TreeModel

USAGE_EXIT, VALIDATION_EXIT, NUMERIC_EXIT = 2, 3, 4


def _variant_arg(text: str):
    try:
        return parse_variant(text)
    except ValidationError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treediff", description=__doc__)
    parser.add_argument("--config", default=None, help="YAML config path (defaults apply if omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--run-id", default="default")
    parser.add_argument("--runs-dir", default=None, help="runs root (default ./runs or $TREEDIFF_RUNS_DIR)")
    parser.add_argument("--force", action="store_true", help="overwrite an existing run stage")
    parser.add_argument("--allow-mismatch", action="store_true", help="skip checkpoint compatibility checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tree", help="train the hierarchical clustering stage")
    p.add_argument("--epochs", type=int, default=None, help="override every phase's epoch count (0 = save init only)")

    p = sub.add_parser("train-diffusion", help="train the cluster-conditioned denoiser")
    p.add_argument("--tree-ckpt", required=True)
    p.add_argument("--variant", type=_variant_arg, default=None, help="conditioning variant, e.g. recon+path")

    p = sub.add_parser("sample", help="generate refined images")
    p.add_argument("--tree-ckpt", required=True)
    p.add_argument("--denoiser-ckpt", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--all-leaves", action="store_true", help="one row per root sample, one column per leaf")
    p.add_argument("--grids", type=int, default=4, help="root samples for --all-leaves")

    p = sub.add_parser("evaluate", help="cluster metrics plus Fréchet-proxy scores")
    p.add_argument("--tree-ckpt", required=True)
    p.add_argument("--denoiser-ckpt", default=None, help="omit for the tree-only baseline")
    p.add_argument("--specificity-samples", type=int, default=48, help="generations per leaf for the entropy metric")

    p = sub.add_parser("ablate", help="train and score several conditioning variants")
    p.add_argument("--tree-ckpt", required=True)
    p.add_argument("--variants", default="recon,recon+path,path", help="comma-separated variant list")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    return parser


# -- shared helpers ------------------------------------------------------------


def _runs_root(args) -> Path:
    if args.runs_dir:
        return Path(args.runs_dir)
    return Path(os.environ.get("TREEDIFF_RUNS_DIR", "runs"))


def _load_cfg(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config, args.overrides)
    else:
        raw: dict = {}
        for item in args.overrides:
            from .config import _merge_override

            raw = _merge_override(raw, item)
        cfg = config_from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.validate()
    return cfg


def _claim(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ValidationError(f"{path} already exists; rerun with --force to overwrite")


def _update_manifest(run_dir: Path, cfg: ExperimentConfig, stage: str, seconds: float, artifacts: dict) -> None:
    manifest_path = run_dir / "run_manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest.setdefault("run_id", run_dir.name)
    manifest["config"] = cfg.to_dict()
    manifest["config_hash"] = cfg.hash()
    manifest.setdefault("stages", {})[stage] = {"seconds": seconds, "artifacts": artifacts}
    for path in artifacts.values():
        if not (run_dir / path).exists():
            raise ValidationError(f"manifest references missing artifact {path}")
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str))


def _load_tree(path: str, cfg: ExperimentConfig, allow_mismatch: bool) -> tuple[TreeModel, dict]:
    arrays, manifest = ckpt.load_checkpoint(path, cfg.hash(), allow_mismatch=allow_mismatch)
    if manifest.get("stage") != "tree":
        raise CompatibilityError(f"{path} is a {manifest.get('stage')!r} checkpoint, expected tree")
    model = TreeModel.from_manifest(cfg, manifest["topology"], Rng(0))
    ckpt.load_module_arrays(model, arrays)
    model.eval()
    return model, manifest


def _load_denoiser(path: str, cfg: ExperimentConfig, tree_model: TreeModel, allow_mismatch: bool):
    arrays, manifest = ckpt.load_checkpoint(path, cfg.hash(), allow_mismatch=allow_mismatch)
    if manifest.get("stage") != "diffusion":
        raise CompatibilityError(f"{path} is a {manifest.get('stage')!r} checkpoint, expected diffusion")
    if not allow_mismatch and manifest.get("tree_state_hash") != tree_model.state_hash():
        raise CompatibilityError("denoiser was trained against a different tree checkpoint")
    variant = parse_variant(manifest["variant"])
    model = build_denoiser(cfg, variant)
    ckpt.load_module_arrays(model, arrays)
    ema = EmaTracker(model)
    ema.load_arrays(arrays)
    sampler_model = ema.averaged_model(model)  # sampling always uses EMA weights
    return sampler_model, variant, manifest


def _dataset(cfg: ExperimentConfig):
    return load_dataset(cfg, Rng(cfg.seed))


# -- commands -------------------------------------------------------------------


def cmd_train_tree(args) -> int:
    cfg = _load_cfg(args)
    if args.epochs is not None:
        for key in ("initial_epochs", "smalltree_epochs", "intermediate_epochs", "finetune_epochs"):
            setattr(cfg.tree_train, key, args.epochs)
    run_dir = _runs_root(args) / args.run_id
    out = run_dir / "checkpoints" / "tree.npz"
    _claim(out, args.force)
    rng = seed_all(cfg.seed)
    train, _ = _dataset(cfg)
    values = torch.from_numpy(train.values)
    started = time.monotonic()
    if args.epochs == 0:
        from .tree.model import init_root_tree

        model = init_root_tree(cfg, rng.spawn("tree-train"))
        history, growth_log = [], []
    else:
        result = tree_train.run_full_schedule(cfg, values, rng.spawn("tree-train"))
        model, history, growth_log = result.model, result.history, result.growth_log
    elapsed = time.monotonic() - started

    run_dir.mkdir(parents=True, exist_ok=True)
    arrays = ckpt.module_arrays(model)
    arrays.update(ckpt.rng_arrays(rng))
    manifest = {
        "stage": "tree",
        "config_hash": cfg.hash(),
        "step": len(history),
        "topology": model.topology.to_adjacency(),
        "state_hash": model.state_hash(),
    }
    ckpt.save_checkpoint(out, arrays, manifest)
    tree_train.write_history_csv(run_dir / "tree_history.csv", history)
    with open(run_dir / "growth_log.jsonl", "w") as fh:
        for event in growth_log:
            fh.write(json.dumps(event) + "\n")
    (run_dir / "tree.txt").write_text(model.topology.dump() + "\n")
    _update_manifest(
        run_dir,
        cfg,
        "tree",
        elapsed,
        {
            "checkpoint": "checkpoints/tree.npz",
            "history": "tree_history.csv",
            "growth_log": "growth_log.jsonl",
        },
    )
    print(f"tree checkpoint: {out} ({len(model.topology.leaves())} leaves)")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _load_cfg(args)
    variant = args.variant if args.variant is not None else parse_variant(cfg.diffusion.variant)
    run_dir = _runs_root(args) / args.run_id
    out = run_dir / "checkpoints" / f"denoiser-{variant.label}.npz"
    _claim(out, args.force)
    tree_model, tree_manifest = _load_tree(args.tree_ckpt, cfg, args.allow_mismatch)
    if not args.allow_mismatch:
        check_tree_compatibility(tree_manifest, cfg)
    rng = seed_all(cfg.seed)
    train, _ = _dataset(cfg)
    values = torch.from_numpy(train.values)
    started = time.monotonic()
    model, ema, history = train_diffusion(
        cfg, tree_model, values, rng.spawn(f"diffusion-{variant.label}"), variant=variant
    )
    elapsed = time.monotonic() - started
    arrays = ckpt.module_arrays(model)
    arrays.update(ema.arrays())
    arrays.update(ckpt.rng_arrays(rng))
    manifest = {
        "stage": "diffusion",
        "config_hash": cfg.hash(),
        "step": len(history),
        "variant": variant.label,
        "tree_state_hash": tree_model.state_hash(),
    }
    ckpt.save_checkpoint(out, arrays, manifest)
    with open(run_dir / f"denoiser_history-{variant.label}.csv", "w") as fh:
        fh.write("step,epoch,loss,lr\n")
        for row in history:
            fh.write(f"{row['step']},{row['epoch']},{row['loss']},{row['lr']}\n")
    _update_manifest(
        run_dir,
        cfg,
        f"diffusion-{variant.label}",
        elapsed,
        {
            "checkpoint": f"checkpoints/denoiser-{variant.label}.npz",
            "history": f"denoiser_history-{variant.label}.csv",
        },
    )
    print(f"denoiser checkpoint: {out}")
    return 0


def _sampler_options(cfg: ExperimentConfig, variant, steps, eta) -> SamplerOptions:
    return SamplerOptions(
        steps=steps if steps is not None else cfg.eval.ddim_steps,
        eta=eta if eta is not None else cfg.eval.ddim_eta,
        variant=variant,
    )


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _runs_root(args) / args.run_id
    sample_dir = run_dir / "samples"
    _claim(sample_dir / "manifest.jsonl", args.force)
    tree_model, _ = _load_tree(args.tree_ckpt, cfg, args.allow_mismatch)
    denoiser, variant, _ = _load_denoiser(args.denoiser_ckpt, cfg, tree_model, args.allow_mismatch)
    schedule = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    opts = _sampler_options(cfg, variant, args.steps, args.eta)
    rng = seed_all(cfg.seed).spawn("sample")
    sample_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    records, image_paths = [], []
    if args.all_leaves:
        rows, row_labels = [], []
        for g in range(args.grids):
            batch = generate_all_leaves(tree_model, denoiser, schedule, opts, rng)
            records.extend(batch)
            rows.append([r.refined for r in batch])
            row_labels.append(f"root {g}")
            for r in batch:
                name = f"grid{g}-leaf{r.leaf_id}.png"
                save_image(sample_dir / name, r.refined)
                image_paths.append(name)
        captions = [f"leaf {r.leaf_id} p={r.leaf_prob:.2f}" for r in records[: len(rows[0])]]
        save_image_grid(rows, captions, sample_dir / "all_leaves_grid.png", row_labels)
    else:
        records = generate(args.n, tree_model, denoiser, schedule, opts, rng)
        for i, r in enumerate(records):
            name = f"sample{i:04d}-leaf{r.leaf_id}.png"
            save_image(sample_dir / name, r.refined)
            image_paths.append(name)
    write_generation_manifest(sample_dir / "manifest.jsonl", records, image_paths)
    _update_manifest(
        run_dir, cfg, "sample", time.monotonic() - started, {"manifest": "samples/manifest.jsonl"}
    )
    print(f"wrote {len(records)} samples under {sample_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _runs_root(args) / args.run_id
    report_path = run_dir / "metrics_report.json"
    _claim(report_path, args.force)
    tree_model, _ = _load_tree(args.tree_ckpt, cfg, args.allow_mismatch)
    refine = args.denoiser_ckpt is not None
    if refine:
        denoiser, variant, _ = _load_denoiser(args.denoiser_ckpt, cfg, tree_model, args.allow_mismatch)
    else:
        denoiser, variant = None, parse_variant("unconditional")
    schedule = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    opts = _sampler_options(cfg, variant, None, None)
    opts.refine = refine
    rng = seed_all(cfg.seed).spawn("evaluate")
    train, test = _dataset(cfg)
    if test.labels is None:
        raise ValidationError("evaluation requires labeled data")
    started = time.monotonic()

    assignments = tree_train.leaf_assignments(tree_model, torch.from_numpy(test.values))
    acc = cluster_accuracy(test.labels, assignments)
    score_nmi = nmi(test.labels, assignments)

    extractor = train_feature_extractor(train, test, cfg.eval.classifier_epochs, rng.spawn("classifier"))
    real_features = extract_features(extractor, test.values)
    refined, _ = reconstruct_refined(torch.from_numpy(test.values), tree_model, denoiser, schedule, opts, rng)
    fid_rec = frechet_distance(real_features, extract_features(extractor, refined))
    n_gen = min(cfg.eval.fid_samples, 4 * len(test))
    gen_records = generate(n_gen, tree_model, denoiser, schedule, opts, rng)
    gen_images = np.stack([r.refined for r in gen_records])
    fid_gen = frechet_distance(real_features, extract_features(extractor, gen_images))

    per_leaf: dict[int, list[np.ndarray]] = {l: [] for l in tree_model.topology.leaves()}
    mass_sum = {l: 0.0 for l in per_leaf}
    for _ in range(args.specificity_samples):
        for record in generate_all_leaves(tree_model, denoiser, schedule, opts, rng):
            per_leaf[record.leaf_id].append(record.refined)
            mass_sum[record.leaf_id] += record.leaf_prob
    masses = {l: mass_sum[l] / args.specificity_samples for l in mass_sum}
    histograms, mean_entropy = leaf_specificity(
        {l: np.stack(v) for l, v in per_leaf.items() if v},
        extractor,
        masses,
        min_mass=cfg.eval.min_leaf_mass,
    )

    report = MetricsReport(
        acc=acc,
        nmi=score_nmi,
        fid_rec=fid_rec,
        fid_gen=fid_gen,
        per_leaf_histograms={l: list(map(float, h)) for l, h in histograms.items()},
        mean_entropy=mean_entropy,
    )
    report.validate()
    run_dir.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    with open(run_dir / "leaf_entropies.csv", "w") as fh:
        fh.write("leaf,entropy,prior_mass\n")
        for leaf, hist in histograms.items():
            h = np.asarray(hist)
            ent = float(-(h[h > 0] * np.log(h[h > 0])).sum())
            fh.write(f"{leaf},{ent},{masses[leaf]}\n")
    _plot_histograms(histograms, run_dir / "leaf_histograms.png")
    _update_manifest(
        run_dir,
        cfg,
        "evaluate",
        time.monotonic() - started,
        {"report": "metrics_report.json", "entropies": "leaf_entropies.csv"},
    )
    print(report.to_json())
    return 0


def _plot_histograms(histograms: dict[int, np.ndarray], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    n = len(histograms)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
    for ax, (leaf, hist) in zip(axes[0], sorted(histograms.items())):
        ax.bar(range(len(hist)), hist)
        ax.set_ylim(0, 1)
        ax.set_title(f"leaf {leaf}", fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    run_dir = _runs_root(args) / args.run_id
    out = run_dir / "ablation.csv"
    _claim(out, args.force)
    tree_model, _ = _load_tree(args.tree_ckpt, cfg, args.allow_mismatch)
    schedule = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    train, test = _dataset(cfg)
    values = torch.from_numpy(train.values)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    labels = [v.strip() for v in args.variants.split(",") if v.strip()]
    if "unconditional" not in labels:
        labels.append("unconditional")  # the score needs its no-conditioning baseline
    variants = [parse_variant(v) for v in labels]

    extractor = train_feature_extractor(train, test, cfg.eval.classifier_epochs, Rng(cfg.seed).spawn("classifier"))
    real_features = extract_features(extractor, test.values)
    started = time.monotonic()
    rows = []
    for variant in variants:
        scores = []
        for seed in seeds:
            rng = Rng(seed).spawn(f"ablate-{variant.label}")
            model, ema, _ = train_diffusion(cfg, tree_model, values, rng, variant=variant)
            sampler_model = ema.averaged_model(model)
            opts = _sampler_options(cfg, variant, None, None)
            n_gen = min(cfg.eval.fid_samples, 4 * len(test))
            records = generate(n_gen, tree_model, sampler_model, schedule, opts, rng)
            images = np.stack([r.refined for r in records])
            scores.append(frechet_distance(real_features, extract_features(extractor, images)))
        rows.append((variant.label, float(np.mean(scores)), float(np.std(scores)), scores))
    rows.sort(key=lambda r: r[1])
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("variant,fid_mean,fid_std,per_seed\n")
        for label, mean, std, scores in rows:
            fh.write(f"{label},{mean},{std},\"{';'.join(f'{s:.4f}' for s in scores)}\"\n")
    _update_manifest(run_dir, cfg, "ablate", time.monotonic() - started, {"table": "ablation.csv"})
    for label, mean, std, _ in rows:
        print(f"{label:>16s}  {mean:8.3f} +- {std:.3f}")
    return 0


_COMMANDS = {
    "train-tree": cmd_train_tree,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (ConfigError, ValidationError, IntegrityError, CompatibilityError, TreediffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
