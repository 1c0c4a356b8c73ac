"""Stage-2 training: noise-prediction loss, EMA shadow weights, and the
training loop that conditions the denoiser on a frozen tree checkpoint.
"""
from __future__ import annotations

import copy
from typing import Callable

import numpy as np
import torch

from ..conditioning import CondVariant, conditioning_from_inference
from ..config import ExperimentConfig, Rng
from ..errors import CompatibilityError, NumericError
from ..tree.model import TreeModel
from .schedule import NoiseSchedule, gather, make_linear_schedule, q_sample


def ddpm_loss(
    model,
    x0: torch.Tensor,
    cond,
    schedule: NoiseSchedule,
    rng: Rng,
    loss_type: str = "l2",
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction objective on inputs in [-1, 1].

    Draws t uniformly over 1..T and fresh Gaussian noise unless both are
    supplied (fixed draws keep the loss deterministic for gradient checks).
    The plain variant is the unweighted squared error summed per sample;
    ``weighted`` applies the bound's per-step coefficient instead.
    """
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (n,), generator=rng.torch)
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng.torch, dtype=x0.dtype, device=x0.device)
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat = model(x_t, t, cond)
    per_sample = ((eps - eps_hat) ** 2).flatten(1).sum(dim=1)
    if loss_type == "weighted":
        beta = gather(schedule.betas, t, per_sample)
        alpha = gather(schedule.alphas, t, per_sample)
        ab = gather(schedule.alpha_bars, t, per_sample)
        var = gather(schedule.posterior_variance, t, per_sample).clamp(min=1e-20)
        weight = (beta**2 / (2.0 * var * alpha * (1.0 - ab))).squeeze().to(per_sample.dtype)
        per_sample = per_sample * weight
    elif loss_type != "l2":
        raise ValueError(f"unknown loss type {loss_type!r}")
    return per_sample.mean()


class EmaTracker:
    """Exponential moving average of a module's parameters."""

    def __init__(self, module: torch.nn.Module):
        self.shadow = {
            name: p.detach().clone() for name, p in module.named_parameters()
        }

    def update(self, module: torch.nn.Module, decay: float) -> None:
        """shadow <- decay * shadow + (1 - decay) * live, for every parameter."""
        with torch.no_grad():
            for name, p in module.named_parameters():
                self.shadow[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

    def copy_to(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])

    def averaged_model(self, module: torch.nn.Module) -> torch.nn.Module:
        avg = copy.deepcopy(module)
        self.copy_to(avg)
        avg.eval()
        return avg

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"ema/{name}": t.cpu().numpy().copy() for name, t in self.shadow.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.shadow:
            self.shadow[name] = torch.from_numpy(np.asarray(arrays[f"ema/{name}"]).copy())


def check_tree_compatibility(tree_manifest: dict, config: ExperimentConfig) -> None:
    got = tree_manifest.get("config_hash")
    want = config.hash()
    if got != want:
        raise CompatibilityError(
            f"tree checkpoint was trained with config {got}, current config is {want}"
        )
    if tree_manifest.get("stage") != "tree":
        raise CompatibilityError("checkpoint is not a tree-stage checkpoint")


def train_diffusion(
    config: ExperimentConfig,
    tree_model: TreeModel,
    values01: torch.Tensor,
    rng: Rng,
    variant: CondVariant | None = None,
    tree_manifest: dict | None = None,
    on_step: Callable[[dict], None] | None = None,
):
    """Fit the denoiser against a frozen tree model.

    Per step: a fresh leaf is drawn from each sample's path distribution, its
    reconstruction and hierarchy embeddings form the conditioning signal, and
    one noise-prediction gradient step runs with warmup, clipping, and an EMA
    update. Returns (denoiser, ema, history).
    """
    from .unet import build_denoiser  # local import keeps module load light

    if tree_manifest is not None:
        check_tree_compatibility(tree_manifest, config)
    dcfg = config.diffusion
    variant = variant if variant is not None else None
    if variant is None:
        from ..conditioning import parse_variant

        variant = parse_variant(dcfg.variant)
    schedule = make_linear_schedule(dcfg.steps, dcfg.beta_start, dcfg.beta_end)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        model = build_denoiser(config, variant)
    ema = EmaTracker(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=dcfg.learning_rate)
    tree_model.eval()
    tree_hash_before = tree_model.state_hash()

    n = values01.shape[0]
    batch = min(dcfg.batch_size, n)
    history: list[dict] = []
    step = 0
    model.train()
    for epoch in range(dcfg.epochs):
        order = rng.numpy.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            x01 = values01[idx]
            cond = None
            if variant.recon or variant.any_embedding:
                cond = conditioning_from_inference(tree_model, x01, variant, rng)
            x0 = x01 * 2.0 - 1.0
            step += 1
            lr = dcfg.learning_rate * min(1.0, step / max(dcfg.anneal_steps, 1))
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = ddpm_loss(model, x0, cond, schedule, rng, loss_type=dcfg.loss_type)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite denoiser loss at step {step}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), dcfg.grad_clip)
            optimizer.step()
            ema.update(model, dcfg.ema_decay)
            row = {"step": step, "epoch": epoch, "loss": float(loss), "lr": lr}
            history.append(row)
            if on_step is not None:
                on_step(row)
    model.eval()
    if tree_model.state_hash() != tree_hash_before:
        raise NumericError("stage-2 training mutated the tree parameters")
    return model, ema, history
