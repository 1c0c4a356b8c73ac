"""Parametrized building blocks of the latent tree.

All representations are spatial maps (channels, s, s); the blocks are small
residual conv stacks. Posterior variances come from softplus heads with a
positivity floor so the precision-weighted merge never divides by zero.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import NumericError, ValidationError

VAR_FLOOR = 1e-6
PROB_EPS = 1e-7


class _ContiguousGroupNorm(nn.GroupNorm):
    # channels-last inputs hit a crashing CPU group-norm backward kernel when
    # the input itself needs no gradient (frozen modules below); normalize the
    # layout on entry so the standard kernel is always selected
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.contiguous())


def _gn(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 and channels >= 8 else (2 if channels % 2 == 0 else 1)
    return _ContiguousGroupNorm(groups, channels)


def _zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def positive_var(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw) + VAR_FLOOR


def posterior_merge(
    mu_hat: torch.Tensor,
    var_hat: torch.Tensor,
    mu_p: torch.Tensor,
    var_p: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Precision-weighted fusion of the bottom-up estimate with the prior.

    Returns the posterior mean and variance:
    ``var_q = 1 / (1/var_hat + 1/var_p)`` and
    ``mu_q = (mu_hat/var_hat + mu_p/var_p) * var_q``.
    """
    if not (torch.all(var_hat > 0) and torch.all(var_p > 0)):
        raise NumericError("posterior_merge requires strictly positive variances")
    prec = 1.0 / var_hat + 1.0 / var_p
    var_q = 1.0 / prec
    mu_q = (mu_hat / var_hat + mu_p / var_p) * var_q
    return mu_q, var_q


def spatial_chain(resolution: int, target: int) -> list[int]:
    """Spatial sizes visited by the strided encoder, e.g. 28 -> [28, 14, 7, 4]."""
    sizes = [resolution]
    while sizes[-1] > target:
        sizes.append((sizes[-1] - 1) // 2 + 1)
    if sizes[-1] != target:
        raise ValidationError(
            f"cannot reach representation size {target} from resolution {resolution} by halving"
        )
    return sizes


class ConvEncoder(nn.Module):
    """Image -> deepest bottom-up feature map (bottom_up_channels, s, s)."""

    def __init__(self, in_channels: int, channels: int, resolution: int, repr_size: int):
        super().__init__()
        sizes = spatial_chain(resolution, repr_size)
        layers: list[nn.Module] = []
        prev = in_channels
        for _ in sizes[1:]:
            layers += [nn.Conv2d(prev, channels, 3, stride=2, padding=1), _gn(channels), nn.SiLU()]
            prev = channels
        if not layers:  # resolution already equals repr_size
            layers = [nn.Conv2d(prev, channels, 3, padding=1), _gn(channels), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.repr_size = repr_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.net(x)
        if out.shape[-1] != self.repr_size:
            raise ValidationError(
                f"encoder produced spatial size {out.shape[-1]}, expected {self.repr_size}"
            )
        return out


class BottomUpBlock(nn.Module):
    """Residual step of the deterministic bottom-up chain (one per depth)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = _gn(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        return d + self.conv(F.silu(self.norm(d)))


class PosteriorHead(nn.Module):
    """Bottom-up feature at the node's depth -> raw Gaussian estimate."""

    def __init__(self, bottom_up_channels: int, latent_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(bottom_up_channels, 2 * latent_channels, 1)
        self.latent_channels = latent_channels

    def forward(self, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw = self.proj(d).chunk(2, dim=1)
        return mu, positive_var(raw)


class Transformation(nn.Module):
    """Parent embedding -> child Gaussian prior, residual in the mean."""

    def __init__(self, latent_channels: int):
        super().__init__()
        self.norm = _gn(latent_channels)
        self.conv1 = nn.Conv2d(latent_channels, latent_channels, 3, padding=1)
        self.conv2 = _zero_init(nn.Conv2d(latent_channels, 2 * latent_channels, 3, padding=1))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv1(F.silu(self.norm(z)))
        mu, raw = self.conv2(F.silu(h)).chunk(2, dim=1)
        return z + mu, positive_var(raw)


class Router(nn.Module):
    """Feature map -> probability of descending to the left child, in (0, 1).

    A small MLP over the flattened map with a batch-normalized hidden layer:
    the batch recentering keeps fresh routers near 0.5 with real per-sample
    spread, so a new branch can specialize per cluster instead of saturating
    toward one child for the whole batch.
    """

    def __init__(self, in_channels: int, spatial_size: int):
        super().__init__()
        flat = in_channels * spatial_size * spatial_size
        hidden = max(4, min(128, flat // 2))
        self.dense1 = nn.Linear(flat, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.head = nn.Linear(hidden, 1)
        nn.init.zeros_(self.head.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.bn(self.dense1(h.flatten(1))))
        return torch.sigmoid(self.head(h)).squeeze(-1)


class ConstantRouter(nn.Module):
    """Fixed-probability router, used to force decisions in tests."""

    def __init__(self, prob: float):
        super().__init__()
        # float64 so forced-probability traversals match enumeration exactly
        self.register_buffer("prob", torch.tensor(float(prob), dtype=torch.float64))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.prob.to(h.dtype).expand(h.shape[0]).clone()


class LeafDecoder(nn.Module):
    """Leaf embedding -> reconstruction mean over image space.

    Grayscale outputs are sigmoid-squashed into (0, 1); color outputs are left
    unsquashed for the unit-variance Gaussian likelihood.
    """

    def __init__(
        self,
        latent_channels: int,
        out_channels: int,
        repr_size: int,
        resolution: int,
        channels: int,
        grayscale: bool = True,
    ):
        super().__init__()
        sizes = spatial_chain(resolution, repr_size)[::-1]  # e.g. [4, 7, 14, 28]
        self.grayscale = grayscale
        self.pre = nn.Conv2d(latent_channels, channels, 3, padding=1)
        ups = []
        for target in sizes[1:]:
            ups.append(
                nn.Sequential(
                    nn.Upsample(size=(target, target), mode="nearest"),
                    nn.Conv2d(channels, channels, 3, padding=1),
                    _gn(channels),
                    nn.SiLU(),
                )
            )
        self.ups = nn.ModuleList(ups)
        # random output init: sibling decoders must differ at birth, otherwise
        # routers see no per-sample signal and saturate to one child
        self.out = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.pre(z))
        for up in self.ups:
            h = up(h)
        h = self.out(h)
        if self.grayscale:
            # keep strictly inside (0,1) so Bernoulli log-likelihoods stay finite
            h = torch.sigmoid(h).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return h


def gaussian_kl(
    mu_q: torch.Tensor, var_q: torch.Tensor, mu_p: torch.Tensor, var_p: torch.Tensor
) -> torch.Tensor:
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over non-batch dims."""
    kl = 0.5 * (torch.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0)
    return kl.flatten(1).sum(dim=1)


def bernoulli_kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """KL(Ber(q) || Ber(p)) with clamped probabilities, per sample."""
    q = q.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return q * torch.log(q / p) + (1.0 - q) * torch.log((1.0 - q) / (1.0 - p))


def standard_normal_kl(mu: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, var) || N(0, I)) summed over non-batch dims."""
    kl = 0.5 * (mu**2 + var - torch.log(var) - 1.0)
    return kl.flatten(1).sum(dim=1)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic transformer-style frequency embedding of integer steps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    )
    args = t[:, None].to(freqs.dtype) * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
