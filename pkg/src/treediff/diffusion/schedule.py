"""Noise schedule tables and the closed-form forward process.

Steps are numbered 1..T; tables are float64 numpy arrays indexed ``t - 1``.
The cumulative product at step 0 is defined as 1, which makes the step-1
forward posterior collapse to a point mass on the clean image. Derived
coefficients are precomputed in float64 so expressions like 1 - abar_1 never
cancel in working precision; they are cast to the image dtype only when
applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray  # shifted right, entry 0 is 1.0
    posterior_variance: np.ndarray  # beta-tilde
    # derived float64 coefficient tables
    sqrt_alpha_bars: np.ndarray = field(default=None)
    sqrt_one_minus_alpha_bars: np.ndarray = field(default=None)
    posterior_coef_clean: np.ndarray = field(default=None)  # weight on x0
    posterior_coef_noisy: np.ndarray = field(default=None)  # weight on x_t
    eps_coef: np.ndarray = field(default=None)  # beta / sqrt(1 - abar)
    recip_sqrt_alphas: np.ndarray = field(default=None)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def validate(self) -> None:
        b = self.betas
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ValidationError("betas must lie in (0, 1)")
        if not np.all(np.diff(b) >= 0):
            raise ValidationError("betas must be non-decreasing")
        ab = self.alpha_bars
        if not (np.all(np.diff(ab) < 0) and np.all(ab > 0) and np.all(ab < 1)):
            raise ValidationError("cumulative alpha must be strictly decreasing in (0, 1)")
        pv = self.posterior_variance
        if abs(pv[0]) > 1e-12 or not np.all(pv[1:] > 0) or np.any(pv > b + 1e-15):
            raise ValidationError("posterior variance must satisfy 0 <= beta-tilde <= beta")


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas, inclusive of both endpoints."""
    if T < 2:
        raise ValidationError("schedule needs at least 2 steps")
    if not (0 < beta_start < beta_end < 1):
        raise ValidationError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variance = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
    schedule = NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        alpha_bars_prev=alpha_bars_prev,
        posterior_variance=posterior_variance,
        sqrt_alpha_bars=np.sqrt(alpha_bars),
        sqrt_one_minus_alpha_bars=np.sqrt(1.0 - alpha_bars),
        posterior_coef_clean=np.sqrt(alpha_bars_prev) * betas / (1.0 - alpha_bars),
        posterior_coef_noisy=np.sqrt(alphas) * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars),
        eps_coef=betas / np.sqrt(1.0 - alpha_bars),
        recip_sqrt_alphas=1.0 / np.sqrt(alphas),
    )
    schedule.validate()
    return schedule


def _check_t(t: torch.Tensor | int, T: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t[None]
    if torch.any(t < 1) or torch.any(t > T):
        raise ValidationError(f"step index out of range 1..{T}")
    return t


def gather(table: np.ndarray, t: torch.Tensor | int, like: torch.Tensor) -> torch.Tensor:
    """Per-sample float64 coefficient lookup broadcast against a batch.

    Callers combine coefficients in float64 and cast with ``.to(like.dtype)``
    at the point of application.
    """
    t = _check_t(t, table.shape[0])
    vals = torch.from_numpy(table)[t - 1]
    if vals.shape[0] == 1 and like.shape[0] != 1:
        vals = vals.expand(like.shape[0])
    return vals.to(like.device).reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t: torch.Tensor | int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward draw: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    c0 = gather(schedule.sqrt_alpha_bars, t, x0).to(x0.dtype)
    ce = gather(schedule.sqrt_one_minus_alpha_bars, t, x0).to(x0.dtype)
    return c0 * x0 + ce * eps


def forward_posterior(
    x_t: torch.Tensor, x0: torch.Tensor, t: torch.Tensor | int, schedule: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """Tractable posterior of the forward chain given the clean image.

    Returns the mean and the (broadcast) variance beta-tilde.
    """
    coef0 = gather(schedule.posterior_coef_clean, t, x_t).to(x_t.dtype)
    coeft = gather(schedule.posterior_coef_noisy, t, x_t).to(x_t.dtype)
    var = gather(schedule.posterior_variance, t, x_t).to(x_t.dtype)
    return coef0 * x0 + coeft * x_t, var
