"""Cluster-conditioning signals handed from the tree stage to the denoiser.

A signal bundles, per sample: the drawn leaf, that leaf's reconstruction, and
whichever hierarchy embeddings the configured variant injects (the leaf's own
embedding, or the whole root-to-leaf embedding set stacked by depth).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import Rng
from .errors import ValidationError
from .tree.model import TreeModel

_TOKENS = ("recon", "leaf", "embed", "path")


@dataclass(frozen=True)
class CondVariant:
    """Which conditioning inputs the denoiser consumes."""

    recon: bool = False
    leaf: bool = False
    embed: bool = False
    path: bool = False

    @property
    def label(self) -> str:
        parts = [t for t in _TOKENS if getattr(self, t)]
        return "+".join(parts) if parts else "unconditional"

    @property
    def any_embedding(self) -> bool:
        return self.leaf or self.embed or self.path


def parse_variant(text: str) -> CondVariant:
    text = text.strip().lower()
    if text in ("unconditional", "none", ""):
        return CondVariant()
    flags = {}
    for token in text.split("+"):
        token = token.strip()
        if token not in _TOKENS:
            raise ValidationError(f"unknown conditioning token {token!r} in variant {text!r}")
        if token in flags:
            raise ValidationError(f"duplicate conditioning token {token!r}")
        flags[token] = True
    return CondVariant(**flags)


@dataclass
class ConditioningSignal:
    """Per-sample conditioning inputs for one denoiser call."""

    variant: CondVariant
    leaf_ids: torch.Tensor  # (N,) node ids, bookkeeping
    leaf_index: torch.Tensor | None = None  # (N,) position among leaves
    leaf_embedding: torch.Tensor | None = None  # (N, C, s, s)
    path_embeddings: torch.Tensor | None = None  # (N, max_depth+1, C, s, s)
    path_mask: torch.Tensor | None = None  # (N, max_depth+1)
    recon: torch.Tensor | None = None  # (N, C_img, H, W) in [0, 1]

    def __post_init__(self):
        if self.path_embeddings is not None:
            if self.path_mask is None or not bool(self.path_mask[:, 0].all()):
                raise ValidationError("path embeddings must be root-anchored and masked")
        if self.variant.recon and self.recon is None:
            raise ValidationError("variant requires a leaf reconstruction")

    def to(self, dtype: torch.dtype) -> "ConditioningSignal":
        def cast(t):
            return None if t is None else t.to(dtype)

        return ConditioningSignal(
            self.variant,
            self.leaf_ids,
            self.leaf_index,
            cast(self.leaf_embedding),
            cast(self.path_embeddings),
            cast(self.path_mask),
            cast(self.recon),
        )


def decode_for_assignments(
    model: TreeModel, z_by_node: dict[int, torch.Tensor], leaf_draw: torch.Tensor
) -> torch.Tensor:
    """Per-sample reconstruction from each sample's drawn leaf."""
    n = leaf_draw.shape[0]
    out = None
    for leaf in model.topology.leaves():
        rows = (leaf_draw == leaf).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        recon = model.decode_leaf(leaf, z_by_node[leaf][rows])
        if out is None:
            out = torch.zeros((n,) + recon.shape[1:], dtype=recon.dtype, device=recon.device)
        out[rows] = recon
    if out is None:
        raise ValidationError("no samples to decode")
    return out


def build_signal(
    model: TreeModel,
    z_by_node: dict[int, torch.Tensor],
    leaf_draw: torch.Tensor,
    variant: CondVariant,
    recon: torch.Tensor | None = None,
) -> ConditioningSignal:
    """Gather per-sample conditioning tensors for the drawn leaves."""
    topo = model.topology
    leaves = topo.leaves()
    n = leaf_draw.shape[0]
    ref = z_by_node[0]
    leaf_index = torch.zeros(n, dtype=torch.long)
    for pos, leaf in enumerate(leaves):
        leaf_index[leaf_draw == leaf] = pos

    leaf_embedding = None
    if variant.embed:
        leaf_embedding = torch.zeros_like(ref)
        for leaf in leaves:
            rows = leaf_draw == leaf
            if rows.any():
                leaf_embedding[rows] = z_by_node[leaf][rows]

    path_embeddings = path_mask = None
    if variant.path:
        depth_slots = model.config.tree.max_depth + 1
        path_embeddings = torch.zeros((n, depth_slots) + ref.shape[1:], dtype=ref.dtype, device=ref.device)
        path_mask = torch.zeros((n, depth_slots), dtype=ref.dtype, device=ref.device)
        for leaf in leaves:
            rows = (leaf_draw == leaf).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            for nid in topo.path_to(leaf):
                depth = topo.nodes[nid].depth
                path_embeddings[rows, depth] = z_by_node[nid][rows]
                path_mask[rows, depth] = 1.0

    if variant.recon and recon is None:
        recon = decode_for_assignments(model, z_by_node, leaf_draw)

    return ConditioningSignal(
        variant=variant,
        leaf_ids=leaf_draw,
        leaf_index=leaf_index,
        leaf_embedding=leaf_embedding,
        path_embeddings=path_embeddings,
        path_mask=path_mask,
        recon=recon if variant.recon else None,
    )


@torch.no_grad()
def conditioning_from_inference(
    model: TreeModel, x: torch.Tensor, variant: CondVariant, rng: Rng, mode: str = "sample"
) -> ConditioningSignal:
    """Stage-2 training signal: infer, draw a leaf per sample, decode it.

    The leaf is drawn fresh from the per-sample path distribution on every
    call, so low-probability leaves keep contributing conditioning examples.
    """
    result = model.infer(x, rng, mode=mode)
    leaf_draw = model.sample_leaf(result.paths, rng)
    return build_signal(model, result.state.z, leaf_draw, variant)
