"""Diagonal Gaussian latents, analytic KL and the optimal-variance Gaussian likelihood."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch

from .diffcore import DimensionError

Tensor = torch.Tensor

LOG_STD_MIN, LOG_STD_MAX = -7.0, 7.0
SIGMA2_FLOOR = 1e-6


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise DimensionError(f"mean {tuple(self.mean.shape)} vs log_std {tuple(self.log_std.shape)}")
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_stats(cls, stats: Tensor) -> "DiagonalGaussian":
        """Split a ``[B,2*Cz,h,w]`` network output into mean and log-std halves."""
        mean, log_std = stats.chunk(2, dim=1)
        return cls(mean, log_std)

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()

    @property
    def shape(self) -> torch.Size:
        return self.mean.shape


@dataclass
class LatentSample:
    value: Tensor
    source: Literal["posterior", "prior"]


def sample_reparam(dist: DiagonalGaussian, noise: Tensor, source: Literal["posterior", "prior"] = "posterior") -> LatentSample:
    """``mean + exp(log_std) * noise`` with ``noise ~ N(0, I)``."""
    if noise.shape != dist.mean.shape:
        raise DimensionError(f"noise {tuple(noise.shape)} vs distribution {tuple(dist.mean.shape)}")
    return LatentSample(dist.mean + dist.std * noise, source)


def kl_diag_gaussian(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) summed over all but the leading (batch) dimension."""
    if q.shape != p.shape:
        raise DimensionError(f"KL between shapes {tuple(q.shape)} and {tuple(p.shape)}")
    # float64 and the expm1 form avoid float32 cancellation pushing q ~ p below zero
    d = (q.log_std - p.log_std).double()
    mahal = (q.mean - p.mean).double() ** 2 * torch.exp(-2.0 * p.log_std.double())
    kl = 0.5 * (torch.expm1(2.0 * d) - 2.0 * d + mahal)
    return kl.reshape(kl.shape[0], -1).sum(1).to(q.mean.dtype)


def sigma_vae_nll(pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """Gaussian NLL with the variance set to its maximum-likelihood value.

    With ``s2 = max(mse, 1e-6)`` the summed NLL over ``N`` elements is
    ``N * (0.5 * log(2 pi s2) + 0.5)``. Returns ``(loss, sigma)``.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    n = pred.numel()
    if n == 0:
        raise ValueError("sigma_vae_nll on empty tensors")
    mse = ((pred - target) ** 2).mean()
    s2 = mse.clamp_min(SIGMA2_FLOOR)
    loss = n * (0.5 * torch.log(2.0 * math.pi * s2) + 0.5)
    return loss, s2.detach().sqrt()
