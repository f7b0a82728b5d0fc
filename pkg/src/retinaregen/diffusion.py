"""Noise schedule, forward corruption, reverse denoising step and the
noise-prediction objective.

Diffusion operates on unclamped real tensors; clamping to [0, 1] happens
only at the end of a restoration chain, in the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray  # index 0 holds beta_1; length T
    alpha: np.ndarray  # 1 - beta
    alpha_bar: np.ndarray  # length T + 1; alpha_bar[0] = 1 convention

    def alpha_bar_at(self, t):
        """Cumulative product at step t (t = 0..T), scalar or array t."""
        return self.alpha_bar[np.asarray(t)]

    def to_arrays(self) -> dict:
        return {"sched/beta": self.beta, "sched/alpha_bar": self.alpha_bar}


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _as_coeff(value, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-batch coefficient over image dims."""
    t = torch.as_tensor(value, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"t out of range [0, {schedule.T}]: {t}")
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = schedule.alpha_bar_at(t_arr)
    return _as_coeff(np.sqrt(abar), x0) * x0 + _as_coeff(np.sqrt(1.0 - abar), x0) * eps


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    eps_theta: torch.Tensor,
    schedule: NoiseSchedule,
    eps: torch.Tensor | None = None,
    noise_on: bool = True,
) -> torch.Tensor:
    """One reverse update:
    (1/sqrt(a_t)) (x - ((1 - a_t)/sqrt(1 - abar_t)) eps_theta) + sqrt(b_t) eps.
    """
    if not (1 <= t <= schedule.T):
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    a_t = schedule.alpha[t - 1]
    abar_t = schedule.alpha_bar[t]
    b_t = schedule.beta[t - 1]
    mean = (x_t - ((1.0 - a_t) / np.sqrt(1.0 - abar_t)) * eps_theta) / np.sqrt(a_t)
    if noise_on:
        if eps is None:
            raise ValueError("noise_on=True requires eps")
        mean = mean + np.sqrt(b_t) * eps
    return mean


def noise_mse_loss(eps_theta: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_theta.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_theta.shape)} vs {tuple(eps.shape)}")
    loss = torch.mean((eps_theta - eps) ** 2)
    if torch.isnan(loss):
        raise FloatingPointError("NaN in noise MSE inputs")
    return loss


def sample_restore(
    x_T: torch.Tensor,
    model,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Iterate reverse_step from T down to 1; the stochastic term is
    disabled at t = 1. `model(x_t, t)` predicts the noise."""
    x = x_T
    for t in range(schedule.T, 0, -1):
        eps_theta = model(x, t)
        if t > 1:
            eps = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
            x = reverse_step(x, t, eps_theta, schedule, eps=eps, noise_on=True)
        else:
            x = reverse_step(x, t, eps_theta, schedule, noise_on=False)
    return x
