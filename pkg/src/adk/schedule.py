"""Noise schedule and the closed-form sampling math built on it.

Timesteps are 0-based: ``t`` ranges over ``0 .. T-1`` and
``alpha_bars[t] = prod(alphas[0..t])``. Every function accepts ``t`` either
as a Python int (shared by the whole batch) or as an integer tensor with one
entry per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import torch

from .numerics import Rng, randn

Timestep = Union[int, torch.Tensor]
# (x_t [N,C,H,W], t [N]) -> predicted noise [N,C,H,W]
DenoiserHandle = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

DEFAULT_T = 1000
DEFAULT_TAU = 300
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 1e-2


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    tau: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_tildes: np.ndarray

    @property
    def sqrt_alpha_bars(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars)

    @property
    def sqrt_one_minus_alpha_bars(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bars)

    def small_range(self) -> tuple[int, int]:
        """Inclusive bounds of the small-noise timestep set."""
        return 0, self.tau

    def large_range(self) -> tuple[int, int]:
        """Inclusive bounds of the large-noise timestep set."""
        return self.tau + 1, self.T - 1


def linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    tau: int = DEFAULT_TAU,
) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 0 < tau < T:
        raise ValueError(f"tau must satisfy 0 < tau < T, got tau={tau}, T={T}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    beta_tildes = np.zeros(T, dtype=np.float64)
    beta_tildes[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    for arr in (betas, alphas, alpha_bars, beta_tildes):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, tau=tau, betas=betas, alphas=alphas, alpha_bars=alpha_bars, beta_tildes=beta_tildes)


def _check_t(t: Timestep, sched: NoiseSchedule, low: int = 0, high: int | None = None) -> None:
    high = sched.T - 1 if high is None else high
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < low or hi > high:
        raise ValueError(f"timestep out of range [{low}, {high}]: got {t if not isinstance(t, torch.Tensor) else (lo, hi)}")


def _coef(values: np.ndarray, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at ``t`` shaped to broadcast against ``like``."""
    if isinstance(t, torch.Tensor):
        picked = torch.as_tensor(values, dtype=torch.float64)[t.long().reshape(-1)]
        return picked.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(values[int(t)]), dtype=like.dtype)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Corrupt ``x0`` to timestep ``t`` with the given noise."""
    _check_t(t, sched)
    _same_shape(x0, eps, "forward_diffuse")
    return _coef(sched.sqrt_alpha_bars, t, x0) * x0 + _coef(sched.sqrt_one_minus_alpha_bars, t, x0) * eps


def one_step_denoise(x_t: torch.Tensor, t: Timestep, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Direct estimate of the clean image from a single noise prediction."""
    _check_t(t, sched)
    _same_shape(x_t, eps_pred, "one_step_denoise")
    return (x_t - _coef(sched.sqrt_one_minus_alpha_bars, t, x_t) * eps_pred) / _coef(sched.sqrt_alpha_bars, t, x_t)


def ddpm_step(
    x_t: torch.Tensor, t: Timestep, eps_pred: torch.Tensor, z: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}``; pass ``z = 0`` on the final step."""
    _check_t(t, sched, low=1)
    _same_shape(x_t, eps_pred, "ddpm_step")
    _same_shape(x_t, z, "ddpm_step")
    alphas = sched.alphas
    eps_coef = (1.0 - alphas) / sched.sqrt_one_minus_alpha_bars
    mean = (x_t - _coef(eps_coef, t, x_t) * eps_pred) / _coef(np.sqrt(alphas), t, x_t)
    return mean + _coef(sched.beta_tildes, t, x_t) * z


def norm_guided_noise(
    eps_s: torch.Tensor,
    x_ts: torch.Tensor,
    n_ts: torch.Tensor,
    t_s: Timestep,
    w: float,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Shift the small-step noise prediction toward the reference image ``n``."""
    _same_shape(eps_s, x_ts, "norm_guided_noise")
    _same_shape(x_ts, n_ts, "norm_guided_noise")
    _check_t(t_s, sched, high=sched.tau)
    return eps_s - _coef(sched.sqrt_one_minus_alpha_bars, t_s, eps_s) * w * (n_ts - x_ts)


def guided_estimate(
    x_ts: torch.Tensor,
    x_tb: torch.Tensor,
    eps_s: torch.Tensor,
    eps_b: torch.Tensor,
    t_s: Timestep,
    t_b: Timestep,
    w: float,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Norm-guided reconstruction from already-computed noise predictions.

    ``eps_s``/``eps_b`` are the denoiser's predictions on ``x_ts``/``x_tb``.
    The large-step prediction gives the reference ``n``; it is re-noised to
    ``t_s`` with ``eps_s`` (not fresh noise) and used to correct ``eps_s``
    before the final one-step estimate.
    """
    n = one_step_denoise(x_tb, t_b, eps_b, sched)
    n_ts = forward_diffuse(n, t_s, eps_s, sched)
    eps_mod = norm_guided_noise(eps_s, x_ts, n_ts, t_s, w, sched)
    return one_step_denoise(x_ts, t_s, eps_mod, sched)


def _as_steps(t: Timestep, n: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t.long().reshape(-1).expand(n) if t.numel() == 1 else t.long().reshape(-1)
    return torch.full((n,), int(t), dtype=torch.long)


def norm_guided_reconstruct(
    x0_in: torch.Tensor,
    t_s: Timestep,
    t_b: Timestep,
    w: float,
    denoiser: DenoiserHandle,
    rng: Rng,
    sched: NoiseSchedule,
) -> tuple[torch.Tensor, int]:
    """Two denoiser forwards, one guided one-step reconstruction.

    Returns ``(reconstruction, forwards_used)``; ``forwards_used`` is always 2.
    """
    _check_t(t_s, sched, high=sched.tau)
    _check_t(t_b, sched, low=sched.tau + 1)
    eps_s_true = randn(rng, x0_in.shape, x0_in.dtype)
    eps_b_true = randn(rng, x0_in.shape, x0_in.dtype)
    x_ts = forward_diffuse(x0_in, t_s, eps_s_true, sched)
    x_tb = forward_diffuse(x0_in, t_b, eps_b_true, sched)
    n = x0_in.shape[0]
    eps_b = denoiser(x_tb, _as_steps(t_b, n))
    eps_s = denoiser(x_ts, _as_steps(t_s, n))
    return guided_estimate(x_ts, x_tb, eps_s, eps_b, t_s, t_b, w, sched), 2
