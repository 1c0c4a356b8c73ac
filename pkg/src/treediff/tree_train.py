"""Stage-1 optimization: evidence-bound objective, phase training with
freeze contracts, leaf assignment bookkeeping, and the full alternating
train/grow/prune schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import ExperimentConfig, Rng
from .errors import CapacityError, NumericError, ValidationError
from .tree.model import InferenceResult, TreeModel, init_root_tree
from .tree.networks import PROB_EPS, bernoulli_kl, gaussian_kl, standard_normal_kl
from .tree.topology import ROOT_ID

HISTORY_COLUMNS = ("epoch", "phase", "rec", "kl_root", "kl_nodes", "kl_decisions", "total")


@dataclass
class ElboTerms:
    """Batch-mean objective components; ``total`` is the bound to maximize."""

    rec: torch.Tensor
    kl_root: torch.Tensor
    kl_nodes: torch.Tensor
    kl_decisions: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.rec - (self.kl_root + self.kl_nodes + self.kl_decisions)

    def check_finite(self) -> "ElboTerms":
        for name in ("rec", "kl_root", "kl_nodes", "kl_decisions"):
            if not torch.isfinite(getattr(self, name)):
                raise NumericError(f"non-finite objective term {name!r}")
        return self

    def floats(self) -> dict[str, float]:
        return {
            "rec": float(self.rec.detach()),
            "kl_root": float(self.kl_root.detach()),
            "kl_nodes": float(self.kl_nodes.detach()),
            "kl_decisions": float(self.kl_decisions.detach()),
            "total": float(self.total.detach()),
        }


def reconstruction_loglik(x: torch.Tensor, recon: torch.Tensor, grayscale: bool) -> torch.Tensor:
    """Per-sample log-likelihood of ``x`` under one leaf's reconstruction."""
    if grayscale:
        recon = recon.clamp(PROB_EPS, 1.0 - PROB_EPS)
        ll = x * torch.log(recon) + (1.0 - x) * torch.log(1.0 - recon)
    else:
        ll = -0.5 * ((x - recon) ** 2 + math.log(2.0 * math.pi))
    return ll.flatten(1).sum(dim=1)


def elbo_terms_from_inference(
    model: TreeModel,
    result: InferenceResult,
    x: torch.Tensor,
    expectation: str = "exact",
    rng: Rng | None = None,
) -> ElboTerms:
    """Objective terms for one traversal.

    ``exact`` enumerates all root-to-leaf paths, weighting every term by the
    node's reach probability. ``mc`` scores a single sampled path per input;
    averaged over path draws it matches the exact expectation.
    """
    state, paths = result.state, result.paths
    topo = model.topology
    recons = model.decode_leaves(state)
    ll = {l: reconstruction_loglik(x, recons[l], model.grayscale) for l in topo.leaves()}

    node_kl = {
        nid: gaussian_kl(
            state.post_mean[nid], state.post_var[nid], state.prior_mean[nid], state.prior_var[nid]
        )
        for nid in topo.iter_ids()
        if nid != ROOT_ID
    }
    decision_kl = {nid: bernoulli_kl(state.router_q[nid], state.router_p[nid]) for nid in state.router_q}
    kl_root = standard_normal_kl(state.post_mean[ROOT_ID], state.post_var[ROOT_ID])

    if expectation == "exact":
        rec = sum(paths.reach_prob[l] * ll[l] for l in topo.leaves())
        kl_nodes = sum(paths.reach_prob[nid] * node_kl[nid] for nid in node_kl) if node_kl else torch.zeros_like(kl_root)
        kl_decisions = (
            sum(paths.reach_prob[nid] * decision_kl[nid] for nid in decision_kl)
            if decision_kl
            else torch.zeros_like(kl_root)
        )
    elif expectation == "mc":
        if rng is None:
            raise ValidationError("single-path expectation needs an rng handle")
        drawn = model.sample_leaf(paths, rng)
        rec = torch.zeros_like(kl_root)
        kl_nodes = torch.zeros_like(kl_root)
        kl_decisions = torch.zeros_like(kl_root)
        for leaf in topo.leaves():
            mask = (drawn == leaf).to(x.dtype)
            if not mask.any():
                continue
            rec = rec + mask * ll[leaf]
            path = topo.path_to(leaf)
            for nid in path[1:]:
                kl_nodes = kl_nodes + mask * node_kl[nid]
            for nid in path[:-1]:
                kl_decisions = kl_decisions + mask * decision_kl[nid]
    else:
        raise ValidationError(f"unknown path expectation {expectation!r}")

    terms = ElboTerms(rec.mean(), kl_root.mean(), kl_nodes.mean(), kl_decisions.mean())
    return terms.check_finite()


def elbo(
    model: TreeModel,
    x: torch.Tensor,
    rng: Rng,
    mode: str = "sample",
    expectation: str = "exact",
) -> ElboTerms:
    result = model.infer(x, rng, mode=mode)
    return elbo_terms_from_inference(model, result, x, expectation=expectation, rng=rng)


@dataclass
class PhaseSpec:
    """One schedule phase: how long to train and which parameters may move."""

    name: str
    epochs: int
    trainable: str = "all"  # all | subtree
    subtree_root: int | None = None


@dataclass
class ScheduleResult:
    model: TreeModel
    growth_log: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def _trainable_parameters(model: TreeModel, phase: PhaseSpec) -> list[torch.nn.Parameter]:
    if phase.trainable == "all":
        model.unfreeze_all()
        return list(model.parameters())
    if phase.trainable == "subtree":
        if phase.subtree_root is None:
            raise ValidationError("subtree phase needs a subtree root")
        names = model.subtree_param_names(phase.subtree_root)
        return [p for name, p in model.named_parameters() if name in names]
    raise ValidationError(f"unknown trainable set {phase.trainable!r}")


def train_phase(
    model: TreeModel,
    values: torch.Tensor,
    phase: PhaseSpec,
    config: ExperimentConfig,
    rng: Rng,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Optimize one phase; only the phase's trainable subset may change."""
    params = _trainable_parameters(model, phase)
    if not params:
        raise ValidationError(f"phase {phase.name!r} has an empty trainable set")
    cfg = config.tree_train
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_decay_step, gamma=cfg.lr_decay_rate)
    n = values.shape[0]
    batch = min(cfg.batch_size, n)
    history = []
    if phase.trainable == "subtree":
        # frozen modules run in eval mode so their batch-norm statistics stay
        # put; only the fresh subtree collects batch statistics
        model.eval()
        for module in model.subtree_modules(phase.subtree_root):
            module.train()
    else:
        model.train()
    for epoch in range(phase.epochs):
        order = rng.numpy.permutation(n)
        sums = {k: 0.0 for k in ("rec", "kl_root", "kl_nodes", "kl_decisions", "total")}
        steps = 0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            if idx.size == 1:
                continue  # batch-norm cannot standardize a single sample
            x = values[idx]
            optimizer.zero_grad()
            terms = elbo(model, x, rng, mode="sample", expectation=cfg.path_expectation)
            loss = -terms.total
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss in phase {phase.name!r}, epoch {epoch}")
            loss.backward()
            optimizer.step()
            for key, value in terms.floats().items():
                sums[key] += value
            steps += 1
        scheduler.step()
        row = {"epoch": epoch, "phase": phase.name}
        row.update({k: v / max(steps, 1) for k, v in sums.items()})
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    return history


@torch.no_grad()
def assignment_counts(model: TreeModel, values: torch.Tensor, batch_size: int = 256) -> dict[int, float]:
    """Expected per-leaf assignment mass: counts_l = sum_x p(l | x)."""
    model.eval()
    totals: dict[int, float] = {l: 0.0 for l in model.topology.leaves()}
    probe = Rng(0)  # mean-mode inference draws nothing from it
    for start in range(0, values.shape[0], batch_size):
        x = values[start : start + batch_size]
        result = model.infer(x, probe, mode="mean")
        for i, leaf in enumerate(result.paths.leaf_ids):
            totals[leaf] += float(result.paths.leaf_probs[:, i].sum().item())
    return totals


@torch.no_grad()
def leaf_assignments(model: TreeModel, values: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Deterministic argmax leaf id per sample (metric bookkeeping)."""
    model.eval()
    probe = Rng(0)
    out = []
    for start in range(0, values.shape[0], batch_size):
        result = model.infer(values[start : start + batch_size], probe, mode="mean")
        out.append(result.paths.assignments().numpy())
    return np.concatenate(out)


def run_full_schedule(
    config: ExperimentConfig,
    values: torch.Tensor,
    rng: Rng,
    on_epoch: Callable[[dict], None] | None = None,
) -> ScheduleResult:
    """Alternate training and growth until the tree reaches its budget, then
    run the full-model phases and prune empty branches."""
    cfg = config.tree_train
    model = init_root_tree(config, rng)
    result = ScheduleResult(model)

    def run(phase: PhaseSpec) -> None:
        rows = train_phase(model, values, phase, config, rng, on_epoch=on_epoch)
        result.history.extend(rows)

    run(PhaseSpec("initial", cfg.initial_epochs))
    total = float(values.shape[0])
    attempts = 0
    while attempts < 4 * config.tree.max_leaves:
        attempts += 1
        counts = assignment_counts(model, values)
        # the budget counts effective leaves: drop branches a failed split
        # left empty so growth can retry elsewhere
        if len(model.topology.leaves()) > 1:
            dead = model.prune(counts, total_mass=total)
            if dead.removed_leaves:
                result.growth_log.append(_prune_row(dead))
                counts = assignment_counts(model, values)
        if len(model.topology.leaves()) >= config.tree.max_leaves:
            break
        try:
            event = model.grow(counts, rng)
        except CapacityError:
            break
        result.growth_log.append(
            {
                "event": "grow",
                "split_leaf": event.split_leaf,
                "children": list(event.children),
                "counts": {str(k): v for k, v in event.counts.items()},
                "num_leaves": event.num_leaves,
            }
        )
        run(PhaseSpec(f"smalltree-{event.split_leaf}", cfg.smalltree_epochs, "subtree", event.split_leaf))
    model.unfreeze_all()
    run(PhaseSpec("intermediate", cfg.intermediate_epochs))
    run(PhaseSpec("finetune", cfg.finetune_epochs))

    counts = assignment_counts(model, values)
    prune_event = model.prune(counts, total_mass=float(values.shape[0]))
    result.growth_log.append(_prune_row(prune_event))
    model.eval()
    return result


def _prune_row(event) -> dict:
    return {
        "event": "prune",
        "removed_leaves": event.removed_leaves,
        "removed_internal": event.removed_internal,
        "renames": {str(k): v for k, v in event.renames.items()},
        "num_leaves": event.num_leaves,
    }


def write_history_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in HISTORY_COLUMNS) + "\n")
