"""Two-stage orchestration: prior sampling through the tree, leaf decoding,
conditioning assembly, and refinement by the denoiser's subsequence sampler.

Stage 2 has no write path into stage-1 state: every operation here runs under
no_grad against a frozen tree model, so clustering behavior is untouched by
generation or refinement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .conditioning import CondVariant, build_signal, decode_for_assignments
from .config import Rng
from .data import ClampTally, from_diffusion_range
from .diffusion.sampler import ddim_sample, ddim_subsequence
from .diffusion.schedule import NoiseSchedule
from .errors import ValidationError
from .tree.model import TreeModel
from .tree.topology import ROOT_ID


@dataclass
class SamplerOptions:
    steps: int = 20
    eta: float = 0.0
    variant: CondVariant = field(default_factory=CondVariant)
    refine: bool = True  # False returns the tree reconstruction untouched
    shared_noise_across_leaves: bool = True
    redraw_path_samples: bool = True


@dataclass
class GenerationRecord:
    root: np.ndarray
    path: list[int]
    leaf_id: int
    leaf_prob: float
    leaf_recon: np.ndarray
    variant: str
    refined: np.ndarray
    seed_fragment: int

    def validate(self, model: TreeModel) -> None:
        topo = model.topology
        if self.path[0] != ROOT_ID or self.path[-1] != self.leaf_id:
            raise ValidationError("record path must run from the root to its leaf")
        for parent, child in zip(self.path, self.path[1:]):
            node = topo.nodes[parent]
            if child not in (node.left, node.right):
                raise ValidationError(f"record path edge {parent}->{child} is not in the tree")
        if self.refined.min() < 0.0 or self.refined.max() > 1.0:
            raise ValidationError("refined image left [0, 1]")

    def summary(self) -> dict:
        return {
            "leaf_id": int(self.leaf_id),
            "leaf_prob": float(self.leaf_prob),
            "path": [int(p) for p in self.path],
            "variant": self.variant,
            "seed_fragment": int(self.seed_fragment),
        }


def _refine(
    denoiser,
    cond,
    shape: tuple,
    schedule: NoiseSchedule,
    opts: SamplerOptions,
    rng: Rng,
    x_T: torch.Tensor | None = None,
) -> np.ndarray:
    """DDIM refinement from pure noise; returns images in [0, 1]."""
    if x_T is None:
        x_T = torch.randn(shape, generator=rng.torch)
    steps = ddim_subsequence(schedule.T, opts.steps)
    out = ddim_sample(denoiser, x_T, cond, schedule, steps, opts.eta, rng)
    return from_diffusion_range(out.numpy(), ClampTally())


@torch.no_grad()
def generate(
    n: int,
    tree_model: TreeModel,
    denoiser,
    schedule: NoiseSchedule,
    opts: SamplerOptions,
    rng: Rng,
) -> list[GenerationRecord]:
    """Sample n images end to end: root draw, path, leaf decode, refinement."""
    if n == 0:
        return []
    tree_model.eval()
    state, paths = tree_model.generate_prior(n, rng)
    leaf_draw = tree_model.sample_leaf(paths, rng)
    recon = decode_for_assignments(tree_model, state.z, leaf_draw)
    cond = None
    if opts.variant.recon or opts.variant.any_embedding:
        cond = build_signal(tree_model, state.z, leaf_draw, opts.variant, recon=recon)
    if opts.refine:
        refined = _refine(denoiser, cond, recon.shape, schedule, opts, rng)
    else:
        refined = recon.numpy()
    base_fragment = rng.next_seed()
    index_of = {leaf: i for i, leaf in enumerate(paths.leaf_ids)}
    records = []
    for i in range(n):
        leaf = int(leaf_draw[i])
        records.append(
            GenerationRecord(
                root=state.z[ROOT_ID][i].numpy().copy(),
                path=tree_model.topology.path_to(leaf),
                leaf_id=leaf,
                leaf_prob=float(paths.leaf_probs[i, index_of[leaf]]),
                leaf_recon=recon[i].numpy().copy(),
                variant=opts.variant.label,
                refined=np.asarray(refined[i]).copy(),
                seed_fragment=base_fragment + i,
            )
        )
        records[-1].validate(tree_model)
    return records


@torch.no_grad()
def reconstruct_refined(
    values01: torch.Tensor,
    tree_model: TreeModel,
    denoiser,
    schedule: NoiseSchedule,
    opts: SamplerOptions,
    rng: Rng,
) -> tuple[np.ndarray, np.ndarray]:
    """Refined reconstructions of given inputs, plus the drawn leaf per input.

    Refinement is generation from fresh noise conditioned on the input's leaf
    reconstruction and hierarchy embeddings, not denoising of the input.
    """
    tree_model.eval()
    result = tree_model.infer(values01, rng, mode="sample")
    leaf_draw = tree_model.sample_leaf(result.paths, rng)
    recon = decode_for_assignments(tree_model, result.state.z, leaf_draw)
    if not opts.refine:
        return recon.numpy(), leaf_draw.numpy()
    cond = None
    if opts.variant.recon or opts.variant.any_embedding:
        cond = build_signal(tree_model, result.state.z, leaf_draw, opts.variant, recon=recon)
    refined = _refine(denoiser, cond, recon.shape, schedule, opts, rng)
    return refined, leaf_draw.numpy()


@torch.no_grad()
def generate_all_leaves(
    tree_model: TreeModel,
    denoiser,
    schedule: NoiseSchedule,
    opts: SamplerOptions,
    rng: Rng,
) -> list[GenerationRecord]:
    """One record per leaf, all descending from the same root sample.

    Reported probabilities come from a single canonical traversal of the
    shared root (they sum to one); the latent samples used for each leaf's
    image are redrawn per path unless ``opts.redraw_path_samples`` is off.
    """
    tree_model.eval()
    cfg = tree_model.config.tree
    z0 = torch.randn((1, cfg.latent_channels, cfg.repr_size, cfg.repr_size), generator=rng.torch)
    state, paths = tree_model._topdown_from_root(z0, rng)
    leaves = tree_model.topology.leaves()
    n = len(leaves)

    ref = z0.expand(n, -1, -1, -1)
    z_by_node: dict[int, torch.Tensor] = {ROOT_ID: ref.clone()}
    for row, leaf in enumerate(leaves):
        if opts.redraw_path_samples:
            chain = tree_model.sample_path(z0, leaf, rng)
        else:
            chain = {nid: state.z[nid] for nid in tree_model.topology.path_to(leaf)}
        for nid, z in chain.items():
            if nid not in z_by_node:
                z_by_node[nid] = torch.zeros((n,) + z.shape[1:], dtype=z.dtype)
            z_by_node[nid][row] = z[0]

    leaf_draw = torch.tensor(leaves)
    recon = decode_for_assignments(tree_model, z_by_node, leaf_draw)
    cond = None
    if opts.variant.recon or opts.variant.any_embedding:
        cond = build_signal(tree_model, z_by_node, leaf_draw, opts.variant, recon=recon)
    if opts.refine:
        if opts.shared_noise_across_leaves:
            x_T = torch.randn((1,) + recon.shape[1:], generator=rng.torch).expand(n, -1, -1, -1).clone()
        else:
            x_T = torch.randn(recon.shape, generator=rng.torch)
        refined = _refine(denoiser, cond, recon.shape, schedule, opts, rng, x_T=x_T)
    else:
        refined = recon.numpy()

    fragment = rng.next_seed()
    records = []
    for row, leaf in enumerate(leaves):
        records.append(
            GenerationRecord(
                root=z0[0].numpy().copy(),
                path=tree_model.topology.path_to(leaf),
                leaf_id=leaf,
                leaf_prob=float(paths.leaf_probs[0, row]),
                leaf_recon=recon[row].numpy().copy(),
                variant=opts.variant.label,
                refined=np.asarray(refined[row]).copy(),
                seed_fragment=fragment + row,
            )
        )
        records[-1].validate(tree_model)
    return records


def save_image(path: str | Path, image01: np.ndarray) -> None:
    """Write one [0,1] image (C, H, W) as a PNG."""
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    arr = np.asarray(image01)
    arr = arr[0] if arr.shape[0] == 1 else np.transpose(arr, (1, 2, 0))
    plt.imsave(str(path), np.clip(arr, 0, 1), cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=1)


def save_image_grid(
    rows: list[list[np.ndarray]],
    captions: list[str],
    path: str | Path,
    row_labels: list[str] | None = None,
) -> None:
    """Grid of [0,1] images: one column per caption, one row per image list."""
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.8 * n_rows), squeeze=False)
    for r, row in enumerate(rows):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.axis("off")
            if c >= len(row):
                continue
            img = row[c]
            img = img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))
            ax.imshow(np.clip(img, 0, 1), cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
            if r == 0 and c < len(captions):
                ax.set_title(captions[c], fontsize=8)
            if c == 0 and row_labels:
                ax.set_ylabel(row_labels[r], fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def write_generation_manifest(path: str | Path, records: list[GenerationRecord], image_paths: list[str]) -> None:
    """JSON-lines manifest: one record summary per line, images by relative path."""
    with open(path, "w") as fh:
        for record, image in zip(records, image_paths):
            row = record.summary()
            row["image"] = image
            fh.write(json.dumps(row) + "\n")
