"""The latent-tree model: bottom-up pass, variational and prior traversals,
leaf decoding, and the grow/prune structural edits.

Every node carries posterior heads; non-root nodes add a prior transformation
from the parent embedding; internal nodes add one router per direction of the
model (generative and inference); leaves own decoders. All per-node modules
are stored in ModuleDicts keyed by the node id.
"""
from __future__ import annotations

import copy
import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from ..config import ExperimentConfig, Rng
from ..errors import CapacityError, ValidationError
from .networks import (
    BottomUpBlock,
    ConvEncoder,
    LeafDecoder,
    PosteriorHead,
    Router,
    Transformation,
    posterior_merge,
)
from .topology import ROOT_ID, TreeTopology


@contextmanager
def seeded_build(rng: Rng):
    """Deterministic module initialization without disturbing global rng state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        yield


@dataclass
class LatentState:
    """Per-node tensors produced by one traversal over a batch."""

    z: dict[int, torch.Tensor] = field(default_factory=dict)
    post_mean: dict[int, torch.Tensor] = field(default_factory=dict)
    post_var: dict[int, torch.Tensor] = field(default_factory=dict)
    prior_mean: dict[int, torch.Tensor] = field(default_factory=dict)
    prior_var: dict[int, torch.Tensor] = field(default_factory=dict)
    router_q: dict[int, torch.Tensor] = field(default_factory=dict)
    router_p: dict[int, torch.Tensor] = field(default_factory=dict)


@dataclass
class PathDistribution:
    """Reach probabilities per node and the induced distribution over leaves."""

    leaf_ids: list[int]
    leaf_probs: torch.Tensor  # (N, |leaves|)
    reach_prob: dict[int, torch.Tensor]

    def validate(self, tol: float = 1e-6) -> None:
        total = self.leaf_probs.sum(dim=1)
        if not torch.all((total - 1.0).abs() <= tol):
            raise ValidationError(
                f"leaf probabilities sum to {total.min().item():.6f}..{total.max().item():.6f}"
            )

    def assignments(self) -> torch.Tensor:
        """Deterministic leaf assignment (argmax), returned as node ids."""
        idx = self.leaf_probs.argmax(dim=1)
        ids = torch.tensor(self.leaf_ids, device=idx.device)
        return ids[idx]


@dataclass
class InferenceResult:
    state: LatentState
    paths: PathDistribution
    features: list[torch.Tensor]  # features[h] is the depth-h bottom-up map


@dataclass
class GrowthEvent:
    split_leaf: int
    children: tuple[int, int]
    counts: dict[int, float]
    num_leaves: int


@dataclass
class PruneEvent:
    removed_leaves: list[int]
    removed_internal: list[int]
    renames: dict[int, int]
    num_leaves: int


class TreeModel(nn.Module):
    """Hierarchical VAE over a learnable binary tree of Gaussian variables."""

    def __init__(self, config: ExperimentConfig, topology: TreeTopology, rng: Rng):
        super().__init__()
        self.config = config
        self.topology = topology
        tree_cfg = config.tree
        data_cfg = config.data
        self.grayscale = data_cfg.channels == 1
        with seeded_build(rng):
            self.encoder = ConvEncoder(
                data_cfg.channels, tree_cfg.bottom_up_channels, data_cfg.resolution, tree_cfg.repr_size
            )
            self.bottom_up_blocks = nn.ModuleList(
                [BottomUpBlock(tree_cfg.bottom_up_channels) for _ in range(tree_cfg.max_depth)]
            )
        self.heads = nn.ModuleDict()
        self.transforms = nn.ModuleDict()
        self.routers_p = nn.ModuleDict()
        self.routers_q = nn.ModuleDict()
        self.decoders = nn.ModuleDict()
        for nid in topology.iter_ids():
            self._build_node(nid, rng)

    # -- construction --------------------------------------------------------

    def _build_node(self, nid: int, rng: Rng) -> None:
        cfg = self.config.tree
        key = str(nid)
        with seeded_build(rng):
            self.heads[key] = PosteriorHead(cfg.bottom_up_channels, cfg.latent_channels)
            if nid != ROOT_ID:
                self.transforms[key] = Transformation(cfg.latent_channels)
            if self.topology.nodes[nid].is_leaf:
                self.decoders[key] = LeafDecoder(
                    cfg.latent_channels,
                    self.config.data.channels,
                    cfg.repr_size,
                    self.config.data.resolution,
                    cfg.bottom_up_channels,
                    grayscale=self.grayscale,
                )
            else:
                self.routers_p[key] = Router(cfg.latent_channels, cfg.repr_size)
                self.routers_q[key] = Router(cfg.bottom_up_channels, cfg.repr_size)

    @classmethod
    def from_manifest(cls, config: ExperimentConfig, adjacency: list[list], rng: Rng) -> "TreeModel":
        topo = TreeTopology.from_adjacency(adjacency, config.tree.max_depth)
        return cls(config, topo, rng)

    # -- passes ----------------------------------------------------------------

    def bottom_up(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Deterministic feature chain; entry ``h`` serves nodes at depth ``h``."""
        if x.ndim != 4 or x.shape[1] != self.config.data.channels:
            raise ValidationError(f"expected (N, {self.config.data.channels}, H, W) input, got {tuple(x.shape)}")
        depth = self.config.tree.max_depth
        feats: list[torch.Tensor | None] = [None] * (depth + 1)
        d = self.encoder(x)
        feats[depth] = d
        for h in range(depth - 1, -1, -1):
            d = self.bottom_up_blocks[h](d)
            feats[h] = d
        return feats  # type: ignore[return-value]

    def _latent_shape(self, n: int, like: torch.Tensor | None = None) -> tuple:
        cfg = self.config.tree
        return (n, cfg.latent_channels, cfg.repr_size, cfg.repr_size)

    def _draw(self, mean: torch.Tensor, var: torch.Tensor, rng: Rng, mode: str) -> torch.Tensor:
        if mode == "mean":
            return mean
        eps = torch.randn(mean.shape, generator=rng.torch, dtype=mean.dtype, device=mean.device)
        return mean + torch.sqrt(var) * eps

    def infer(self, x: torch.Tensor, rng: Rng, mode: str = "sample") -> InferenceResult:
        """Variational traversal of the whole tree for a batch.

        ``mode='mean'`` replaces every reparametrized draw with its mean, which
        makes the pass deterministic for tests and metric bookkeeping.
        """
        if mode not in ("sample", "mean"):
            raise ValidationError(f"unknown inference mode {mode!r}")
        feats = self.bottom_up(x)
        n = x.shape[0]
        state = LatentState()
        reach: dict[int, torch.Tensor] = {ROOT_ID: torch.ones(n, dtype=x.dtype, device=x.device)}
        for nid in self.topology.iter_ids():
            node = self.topology.nodes[nid]
            key = str(nid)
            mu_hat, var_hat = self.heads[key](feats[node.depth])
            if nid == ROOT_ID:
                mu_q, var_q = mu_hat, var_hat
                state.prior_mean[nid] = torch.zeros_like(mu_q)
                state.prior_var[nid] = torch.ones_like(var_q)
            else:
                mu_p, var_p = self.transforms[key](state.z[node.parent])
                state.prior_mean[nid], state.prior_var[nid] = mu_p, var_p
                mu_q, var_q = posterior_merge(mu_hat, var_hat, mu_p, var_p)
            state.post_mean[nid], state.post_var[nid] = mu_q, var_q
            state.z[nid] = self._draw(mu_q, var_q, rng, mode)
            if not node.is_leaf:
                left_prob = self.routers_q[key](feats[node.depth])
                state.router_q[nid] = left_prob
                state.router_p[nid] = self.routers_p[key](state.z[nid])
                reach[node.left] = reach[nid] * left_prob
                reach[node.right] = reach[nid] * (1.0 - left_prob)
        paths = self._paths_from_reach(reach)
        return InferenceResult(state, paths, feats)

    def _paths_from_reach(self, reach: dict[int, torch.Tensor]) -> PathDistribution:
        leaf_ids = self.topology.leaves()
        leaf_probs = torch.stack([reach[l] for l in leaf_ids], dim=1)
        return PathDistribution(leaf_ids, leaf_probs, reach)

    def generate_prior(self, n: int, rng: Rng) -> tuple[LatentState, PathDistribution]:
        """Top-down generative traversal: fresh root samples through the tree."""
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        z0 = torch.randn(self._latent_shape(n), generator=rng.torch, dtype=dtype, device=device)
        return self._topdown_from_root(z0, rng)

    def _topdown_from_root(self, z0: torch.Tensor, rng: Rng) -> tuple[LatentState, PathDistribution]:
        n = z0.shape[0]
        state = LatentState()
        state.z[ROOT_ID] = z0
        state.prior_mean[ROOT_ID] = torch.zeros_like(z0)
        state.prior_var[ROOT_ID] = torch.ones_like(z0)
        reach = {ROOT_ID: torch.ones(n, dtype=z0.dtype, device=z0.device)}
        for nid in self.topology.iter_ids():
            node = self.topology.nodes[nid]
            key = str(nid)
            if nid != ROOT_ID:
                mu_p, var_p = self.transforms[key](state.z[node.parent])
                state.prior_mean[nid], state.prior_var[nid] = mu_p, var_p
                state.z[nid] = self._draw(mu_p, var_p, rng, "sample")
            if not node.is_leaf:
                left_prob = self.routers_p[key](state.z[nid])
                state.router_p[nid] = left_prob
                reach[node.left] = reach[nid] * left_prob
                reach[node.right] = reach[nid] * (1.0 - left_prob)
        return state, self._paths_from_reach(reach)

    def sample_path(self, z0: torch.Tensor, leaf: int, rng: Rng) -> dict[int, torch.Tensor]:
        """Propagate root embeddings down one leaf's path with fresh noise."""
        path = self.topology.path_to(leaf)
        out = {ROOT_ID: z0}
        for nid in path[1:]:
            mu_p, var_p = self.transforms[str(nid)](out[self.topology.nodes[nid].parent])
            out[nid] = self._draw(mu_p, var_p, rng, "sample")
        return out

    def decode_leaves(self, state: LatentState) -> dict[int, torch.Tensor]:
        """One reconstruction per leaf from that leaf's embedding."""
        out = {}
        for leaf in self.topology.leaves():
            if leaf not in state.z:
                raise ValidationError(f"latent state has no embedding for leaf {leaf}")
            out[leaf] = self.decoders[str(leaf)](state.z[leaf])
        return out

    def decode_leaf(self, leaf: int, z: torch.Tensor) -> torch.Tensor:
        return self.decoders[str(leaf)](z)

    def sample_leaf(self, paths: PathDistribution, rng: Rng) -> torch.Tensor:
        """Draw one leaf id per sample from the path distribution."""
        total = paths.leaf_probs.sum(dim=1)
        if torch.any((total - 1.0).abs() > 1e-4):
            raise ValidationError("path distribution is not normalized")
        probs = paths.leaf_probs / total[:, None]
        idx = torch.multinomial(probs, 1, generator=rng.torch).squeeze(1)
        ids = torch.tensor(paths.leaf_ids, device=idx.device)
        return ids[idx]

    # -- structural edits -----------------------------------------------------

    def grow(self, counts: dict[int, float], rng: Rng) -> GrowthEvent:
        """Split the most-populated leaf into two fresh children.

        Pre-existing parameters are frozen; only the new router and the new
        children stay trainable until a later phase unfreezes the model.
        """
        leaves = self.topology.leaves()
        if len(leaves) >= self.config.tree.max_leaves:
            raise CapacityError(f"leaf budget {self.config.tree.max_leaves} reached")
        missing = [l for l in leaves if l not in counts]
        if missing:
            raise ValidationError(f"missing assignment counts for leaves {missing}")
        best = max(counts[l] for l in leaves)
        split = min(l for l in leaves if counts[l] == best)  # tie -> lowest id
        if self.topology.nodes[split].depth >= self.config.tree.max_depth:
            raise CapacityError(f"leaf {split} already sits at max depth")

        topo, left_id, right_id = self.topology.split_leaf(split)
        self.topology = topo
        cfg = self.config.tree
        key = str(split)
        with seeded_build(rng):
            self.routers_p[key] = Router(cfg.latent_channels, cfg.repr_size)
            self.routers_q[key] = Router(cfg.bottom_up_channels, cfg.repr_size)
        old_head = self.heads[key]
        del self.decoders[key]
        for child in (left_id, right_id):
            self._build_node(child, rng)
            # children start the bottom-up heads near the parent's so their
            # assignments begin where the split leaf's did
            child_head = copy.deepcopy(old_head)
            with torch.no_grad():
                for p in child_head.parameters():
                    p.add_(torch.randn(p.shape, generator=rng.torch, dtype=p.dtype) * 1e-2)
            self.heads[str(child)] = child_head

        fresh = self.subtree_param_names(split)
        for name, param in self.named_parameters():
            param.requires_grad_(name in fresh)
        self.topology.validate(self.config.tree.max_leaves)
        return GrowthEvent(split, (left_id, right_id), dict(counts), len(self.topology.leaves()))

    def subtree_param_names(self, split_leaf: int) -> set[str]:
        """Parameter names of the freshly grown subtree under ``split_leaf``."""
        node = self.topology.nodes[split_leaf]
        names = set()
        prefixes = [f"routers_p.{split_leaf}.", f"routers_q.{split_leaf}."]
        for child in (node.left, node.right):
            prefixes += [
                f"heads.{child}.",
                f"transforms.{child}.",
                f"decoders.{child}.",
            ]
        for name, _ in self.named_parameters():
            if any(name.startswith(p) for p in prefixes):
                names.add(name)
        return names

    def subtree_modules(self, split_leaf: int) -> list[nn.Module]:
        """Modules of the freshly grown subtree (for train/eval mode control)."""
        node = self.topology.nodes[split_leaf]
        mods = [self.routers_p[str(split_leaf)], self.routers_q[str(split_leaf)]]
        for child in (node.left, node.right):
            key = str(child)
            mods += [self.heads[key], self.transforms[key], self.decoders[key]]
        return mods

    def unfreeze_all(self) -> None:
        for param in self.parameters():
            param.requires_grad_(True)

    @property
    def frozen_node_ids(self) -> set[int]:
        frozen = set()
        for nid in self.topology.iter_ids():
            key = str(nid)
            params = list(self.heads[key].parameters())
            if key in self.transforms:
                params += list(self.transforms[key].parameters())
            if params and all(not p.requires_grad for p in params):
                frozen.add(nid)
        return frozen

    def prune(self, masses: dict[int, float], total_mass: float, threshold: float = 0.01) -> PruneEvent:
        """Remove leaves whose expected assignment mass falls below
        ``threshold * total_mass`` and collapse single-child parents."""
        leaves = self.topology.leaves()
        doomed = {l for l in leaves if masses.get(l, 0.0) < threshold * total_mass}
        if not doomed:
            return PruneEvent([], [], {}, len(leaves))
        if doomed == set(leaves):
            raise ValidationError("pruning would remove every leaf")
        before = set(self.topology.nodes)
        topo, renames = self.topology.remove_leaves(doomed)
        removed_internal = sorted(before - set(topo.nodes) - doomed - set(renames))
        self.topology = topo

        for dicts in (self.heads, self.transforms, self.routers_p, self.routers_q, self.decoders):
            for nid in list(doomed) + removed_internal:
                if str(nid) in dicts:
                    del dicts[str(nid)]
        for old, new in renames.items():
            for dicts in (self.heads, self.transforms, self.routers_p, self.routers_q, self.decoders):
                if str(old) in dicts:
                    dicts[str(new)] = dicts[str(old)]
                    del dicts[str(old)]
        if renames:
            # a node promoted into the root slot keeps its heads but loses its
            # transformation: the root prior is fixed at N(0, I)
            root_key = str(ROOT_ID)
            if root_key in self.transforms:
                del self.transforms[root_key]
        self.topology.validate(self.config.tree.max_leaves)
        return PruneEvent(sorted(doomed), removed_internal, renames, len(self.topology.leaves()))

    # -- bookkeeping ---------------------------------------------------------

    def state_hash(self) -> str:
        """Digest over all parameters and buffers, for non-interference checks."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()[:16]


def init_root_tree(config: ExperimentConfig, rng: Rng) -> TreeModel:
    """Fresh model: a root with two leaf children."""
    topo = TreeTopology.initial(config.tree.max_depth)
    model = TreeModel(config, topo, rng)
    model.topology.validate(config.tree.max_leaves)
    return model


def enumerate_leaf_probs(topology: TreeTopology, left_probs: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Brute-force oracle: leaf probabilities via explicit path enumeration.

    ``left_probs`` maps each internal node to its per-sample probability of
    descending left. Used by tests to cross-check traversal bookkeeping.
    """
    leaves = topology.leaves()
    out = {}
    for leaf in leaves:
        path = topology.path_to(leaf)
        prob = np.ones_like(next(iter(left_probs.values())), dtype=np.float64)
        for parent, child in zip(path[:-1], path[1:]):
            p_left = np.asarray(left_probs[parent], dtype=np.float64)
            node = topology.nodes[parent]
            prob = prob * (p_left if node.left == child else 1.0 - p_left)
        out[leaf] = prob
    return out
