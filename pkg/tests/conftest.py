import numpy as np
import pytest
import torch

from treediff.config import ExperimentConfig, Rng, SyntheticClusterSpec
from treediff.data import make_synthetic


def micro_config() -> ExperimentConfig:
    """Smallest config whose tree model stays under the 500-parameter budget."""
    cfg = ExperimentConfig()
    cfg.data.resolution = 4
    cfg.data.synthetic = SyntheticClusterSpec(
        num_clusters=2, image_size=4, patterns=("disk", "cross"), noise_std=0.05, samples_per_cluster=16
    )
    cfg.tree.max_depth = 1
    cfg.tree.max_leaves = 2
    cfg.tree.latent_channels = 1
    cfg.tree.repr_size = 2
    cfg.tree.bottom_up_channels = 2
    cfg.validate()
    return cfg


def small_config(max_depth: int = 3, max_leaves: int = 4) -> ExperimentConfig:
    """Quick config for functional tests: 8x8 images, tiny channel counts."""
    cfg = ExperimentConfig()
    cfg.data.resolution = 8
    cfg.data.synthetic = SyntheticClusterSpec(
        num_clusters=4,
        image_size=8,
        patterns=("disk", "cross", "checker", "square"),
        noise_std=0.05,
        samples_per_cluster=24,
    )
    cfg.tree.max_depth = max_depth
    cfg.tree.max_leaves = max_leaves
    cfg.tree.latent_channels = 2
    cfg.tree.repr_size = 2
    cfg.tree.bottom_up_channels = 4
    cfg.diffusion.steps = 20
    cfg.diffusion.base_channels = 8
    cfg.diffusion.channel_multipliers = (1, 2)
    cfg.diffusion.epochs = 2
    cfg.validate()
    return cfg


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    return small_config()


@pytest.fixture
def small_batch(small_cfg, rng):
    return make_synthetic(small_cfg.data.synthetic, rng.spawn("data"))


def randomize_parameters(module: torch.nn.Module, rng: Rng, scale: float = 0.3) -> None:
    """Give every parameter a generic nonzero value (zero-init layers included)
    so finite-difference gradient checks avoid structurally flat directions."""
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=rng.torch, dtype=p.dtype) * scale)


def finite_difference_max_rel_err(module: torch.nn.Module, loss_fn, h: float = 1e-5) -> float:
    """Central-difference gradient oracle vs autograd, over every parameter.

    The module must be float64 and ``loss_fn`` deterministic. Returns the max
    relative error with a small absolute floor in the denominator.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                an = float(gflat[i])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def param_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def to_tensor(batch) -> torch.Tensor:
    return torch.from_numpy(np.asarray(batch.values, dtype=np.float32))
