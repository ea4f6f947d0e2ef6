"""Training objectives: masked two-scale noise loss and the segmentation loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 5.0  # weight of the focal term
    smooth_l1_transition: float = 1.0
    focal_focusing: float = 2.0
    focal_alpha: float = 0.75
    clamp: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.smooth_l1_transition <= 0:
            raise ValueError("smooth-L1 transition must be > 0")
        if self.focal_focusing < 0:
            raise ValueError("focal focusing must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")


def _same_shape(*pairs):
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def noise_loss(
    eps_s: torch.Tensor,
    eps_pred_s: torch.Tensor,
    eps_b: torch.Tensor,
    eps_pred_b: torch.Tensor,
    y: torch.Tensor,
) -> torch.Tensor:
    """Mean over normal samples' two-scale noise MSE; anomalous samples contribute 0.

    Per sample ``(1 - y) * (mse_s + mse_b) / 2`` with pixel-mean squared
    errors, then averaged over the whole batch.
    """
    _same_shape((eps_s, eps_pred_s), (eps_b, eps_pred_b), (eps_s, eps_b))
    y = torch.as_tensor(y).reshape(-1)
    if y.numel() != eps_s.shape[0]:
        raise ValueError(f"{y.numel()} labels for a batch of {eps_s.shape[0]}")
    dims = tuple(range(1, eps_s.ndim))
    per_sample = 0.5 * (((eps_s - eps_pred_s) ** 2).mean(dims) + ((eps_b - eps_pred_b) ** 2).mean(dims))
    # where() rather than multiplication so anomalous entries cannot leak in, even as inf/nan.
    return torch.where(y == 0, per_sample, torch.zeros_like(per_sample)).mean()


def smooth_l1(M: torch.Tensor, M_hat: torch.Tensor, transition: float = 1.0) -> torch.Tensor:
    _same_shape((M, M_hat))
    d = (M.to(M_hat.dtype) - M_hat).abs()
    return torch.where(d < transition, 0.5 * d**2 / transition, d - 0.5 * transition).mean()


def focal_loss(
    M: torch.Tensor,
    M_hat: torch.Tensor,
    focusing: float = 2.0,
    alpha: float = 0.75,
    clamp: float = 1e-6,
) -> torch.Tensor:
    _same_shape((M, M_hat))
    positive = M > 0.5
    p = M_hat.clamp(clamp, 1.0 - clamp)
    p_t = torch.where(positive, p, 1.0 - p)
    alpha_t = torch.where(positive, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return (-alpha_t * (1.0 - p_t) ** focusing * torch.log(p_t)).mean()


def mask_loss(M: torch.Tensor, M_hat: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return smooth_l1(M, M_hat, weights.smooth_l1_transition) + weights.gamma * focal_loss(
        M, M_hat, weights.focal_focusing, weights.focal_alpha, weights.clamp
    )


def total_loss(noise: torch.Tensor | float, mask: torch.Tensor | float):
    return noise + mask
