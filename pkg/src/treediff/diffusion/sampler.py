"""Reverse-process samplers: the full ancestral chain and the subsequence
sampler that reuses only a subset of steps.

Both expose their per-step transition (mean, sigma) so tests can check that
the subsequence sampler at eta=1 over all steps reproduces the ancestral
chain exactly. Intermediate states are never clamped; the final sample is
clamped to [-1, 1] once at the end of the chain.
"""
from __future__ import annotations

import torch

from ..config import Rng
from ..conditioning import ConditioningSignal
from ..errors import ValidationError
from .schedule import NoiseSchedule, gather


def ddpm_mean_sigma(
    eps_hat: torch.Tensor, x_t: torch.Tensor, t: int, schedule: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """Ancestral transition parameters from the predicted noise."""
    eps_coef = gather(schedule.eps_coef, t, x_t)
    recip = gather(schedule.recip_sqrt_alphas, t, x_t)
    mean = recip.to(x_t.dtype) * (x_t - eps_coef.to(x_t.dtype) * eps_hat)
    sigma = torch.sqrt(gather(schedule.posterior_variance, t, x_t)).to(x_t.dtype)
    return mean, sigma


def ddpm_step(
    model,
    x_t: torch.Tensor,
    t: int,
    cond: ConditioningSignal | None,
    schedule: NoiseSchedule,
    rng: Rng,
) -> torch.Tensor:
    """One ancestral reverse step; the final step (t=1) adds no noise."""
    eps_hat = model(x_t, t, cond)
    mean, sigma = ddpm_mean_sigma(eps_hat, x_t, t, schedule)
    if t <= 1:
        return mean
    noise = torch.randn(x_t.shape, generator=rng.torch, dtype=x_t.dtype, device=x_t.device)
    return mean + sigma * noise


@torch.no_grad()
def ddpm_sample(
    model,
    x_T: torch.Tensor,
    cond: ConditioningSignal | None,
    schedule: NoiseSchedule,
    rng: Rng,
    clamp_final: bool = True,
) -> torch.Tensor:
    x = x_T
    for t in range(schedule.T, 0, -1):
        x = ddpm_step(model, x, t, cond, schedule, rng)
    return x.clamp(-1.0, 1.0) if clamp_final else x


def ddim_subsequence(T: int, n_steps: int) -> list[int]:
    """Evenly spaced decreasing steps, always containing T and 1."""
    if not 1 <= n_steps <= T:
        raise ValidationError(f"need 1 <= n_steps <= {T}")
    if n_steps == 1:
        return [T]
    grid = torch.linspace(1, T, n_steps).round().to(torch.long).tolist()
    steps = sorted(set(int(v) for v in grid), reverse=True)
    steps[0], steps[-1] = T, 1
    return steps


def _validate_subsequence(steps: list[int], schedule: NoiseSchedule) -> None:
    if not steps:
        raise ValidationError("empty step subsequence")
    if steps[0] != schedule.T:
        raise ValidationError(f"subsequence must start at T={schedule.T}")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValidationError("subsequence must be strictly decreasing")
    if steps[-1] < 1 or steps[0] > schedule.T:
        raise ValidationError("subsequence steps must lie in 1..T")


def ddim_mean_sigma(
    eps_hat: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    t_next: int,
    schedule: NoiseSchedule,
    eta: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Subsequence transition from step t to step t_next (t_next may be 0).

    Returns (mean, sigma, x0_hat); at t_next = 0 the cumulative alpha is 1,
    so the mean collapses to the clean-image estimate. Coefficients stay in
    float64 until they multiply the batch.
    """
    ab_t = gather(schedule.alpha_bars, t, x_t)
    ab_next = (
        gather(schedule.alpha_bars, t_next, x_t)
        if t_next >= 1
        else torch.ones_like(ab_t)
    )
    x0_hat = (x_t - torch.sqrt(1.0 - ab_t).to(x_t.dtype) * eps_hat) / torch.sqrt(ab_t).to(x_t.dtype)
    sigma64 = (
        eta
        * torch.sqrt((1.0 - ab_next) / (1.0 - ab_t))
        * torch.sqrt((1.0 - ab_t / ab_next).clamp(min=0.0))
    )
    dir_coef = torch.sqrt((1.0 - ab_next - sigma64**2).clamp(min=0.0))
    mean = torch.sqrt(ab_next).to(x_t.dtype) * x0_hat + dir_coef.to(x_t.dtype) * eps_hat
    return mean, sigma64.to(x_t.dtype), x0_hat


@torch.no_grad()
def ddim_sample(
    model,
    x_T: torch.Tensor,
    cond: ConditioningSignal | None,
    schedule: NoiseSchedule,
    steps: list[int],
    eta: float,
    rng: Rng,
    clamp_final: bool = True,
) -> torch.Tensor:
    """Run the subsequence sampler from pure noise to a clean-image estimate.

    ``eta = 0`` is fully deterministic given ``x_T``; ``eta = 1`` over the full
    subsequence matches the ancestral sampler step for step.
    """
    _validate_subsequence(steps, schedule)
    x = x_T
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        eps_hat = model(x, t, cond)
        mean, sigma, _ = ddim_mean_sigma(eps_hat, x, t, t_next, schedule, eta)
        x = mean
        if eta > 0 and t_next >= 1:
            noise = torch.randn(x.shape, generator=rng.torch, dtype=x.dtype, device=x.device)
            x = x + sigma * noise
    return x.clamp(-1.0, 1.0) if clamp_final else x
