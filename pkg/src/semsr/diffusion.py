"""DDPM noise schedule, forward/reverse process and the denoising loss.

Timesteps are 0-indexed: ``alpha_bars[t] = prod(alphas[:t + 1])`` is the
signal fraction remaining after step ``t``. Every stochastic function takes
its noise explicitly so callers own the RNG.

Functions accept numpy arrays or torch tensors interchangeably.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    # original timestep index for each entry; differs from arange(T) after respacing
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_betas(cls, betas, timesteps=None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if timesteps is None:
            timesteps = np.arange(len(betas))
        return cls(betas, alphas, alpha_bars, np.asarray(timesteps, dtype=np.int64))


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def respace(sched: NoiseSchedule, timesteps) -> NoiseSchedule:
    """Schedule over an increasing subsequence of ``sched``'s timesteps.

    Betas are recomputed so the cumulative products match the parent at the
    kept timesteps, which lets ``reverse_step`` jump between them.
    """
    ts = np.asarray(sorted(set(int(t) for t in timesteps)), dtype=np.int64)
    if len(ts) == 0 or ts[0] < 0 or ts[-1] >= sched.T:
        raise ScheduleError("respaced timesteps must lie within the parent schedule")
    abar = sched.alpha_bars[ts]
    prev = np.concatenate([[1.0], abar[:-1]])
    return NoiseSchedule.from_betas(1.0 - abar / prev, timesteps=ts)


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < sched.T:
        raise ScheduleError(f"timestep {t} outside [0, {sched.T})")
    return t


def _coef(values: np.ndarray, t, like):
    """Gather per-sample coefficients and broadcast against ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        c = torch.as_tensor(values, dtype=like.dtype, device=like.device)[t.long()]
        return c.view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t)])


def forward_step(x_prev, t: int, sched: NoiseSchedule, noise):
    """Sample q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    _check_shapes(x_prev, noise, "forward_step")
    t = _check_t(t, sched)
    beta = float(sched.betas[t])
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def forward_marginal(x0, t, sched: NoiseSchedule, noise):
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` may be an int or a 1-D tensor of per-sample timesteps.
    """
    _check_shapes(x0, noise, "forward_marginal")
    if not (isinstance(t, torch.Tensor) and t.ndim == 1):
        t = _check_t(t, sched)
    abar = _coef(sched.alpha_bars, t, x0)
    if isinstance(abar, float):
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * noise


def predict_x0(x_t, t: int, sched: NoiseSchedule, predicted_noise):
    _check_shapes(x_t, predicted_noise, "predict_x0")
    abar = float(sched.alpha_bars[_check_t(t, sched)])
    return (x_t - math.sqrt(1.0 - abar) * predicted_noise) / math.sqrt(abar)


def reverse_step(x_t, t: int, predicted_noise, sched: NoiseSchedule, noise=None):
    """One ancestral step x_t -> x_{t-1} with the epsilon-parameterised mean.

    Variance is fixed to beta_t. ``noise=None`` drops the stochastic term, and
    at ``t == 0`` it is always dropped.
    """
    _check_shapes(x_t, predicted_noise, "reverse_step")
    t = _check_t(t, sched)
    beta = float(sched.betas[t])
    alpha = float(sched.alphas[t])
    abar = float(sched.alpha_bars[t])
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * predicted_noise) / math.sqrt(alpha)
    if noise is None or t == 0:
        return mean
    _check_shapes(x_t, noise, "reverse_step noise")
    return mean + math.sqrt(beta) * noise


def training_loss(model, x0_latent: torch.Tensor, cond, t: torch.Tensor,
                  noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``noise`` and ``model(x_t, t, cond)``."""
    _check_shapes(x0_latent, noise, "training_loss")
    if not isinstance(t, torch.Tensor):
        t = torch.full((x0_latent.shape[0],), int(t), dtype=torch.long)
    x_t = forward_marginal(x0_latent, t, sched, noise)
    pred = model(x_t, t, cond)
    _check_shapes(pred, noise, "training_loss prediction")
    if not torch.isfinite(pred).all():
        raise FloatingPointError("noise predictor produced non-finite output")
    return torch.mean((noise - pred) ** 2)


def timestep_ladder(t_start: int, num_steps: int) -> np.ndarray:
    """Strictly decreasing, evenly spaced timesteps from ``t_start`` down to 0.

    With ``num_steps == 1`` the ladder is just ``[t_start]``; the respaced
    schedule then jumps straight to the clean estimate.
    """
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    ladder = np.round(np.linspace(t_start, 0, num_steps)).astype(np.int64)
    return np.unique(ladder)[::-1].copy()
