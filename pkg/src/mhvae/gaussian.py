"""Diagonal-Gaussian calculus: KL divergence, reparameterized sampling and
product-of-experts fusion.

Every function is pure and differentiable with respect to the distribution
parameters.  Variances are carried as log-variances throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from mhvae.errors import ContractError

LOG_VAR_MIN = -14.0
LOG_VAR_MAX = 14.0


@dataclass(frozen=True)
class DiagGaussian:
    """Factorized Normal distribution with elementwise ``mean`` and ``log_var``."""

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ContractError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )

    @property
    def shape(self) -> torch.Size:
        return self.mean.shape

    @property
    def var(self) -> torch.Tensor:
        return self.log_var.exp()

    @property
    def std(self) -> torch.Tensor:
        return (0.5 * self.log_var).exp()

    @classmethod
    def standard(cls, shape, dtype=None, device=None) -> "DiagGaussian":
        """N(0, I) over a tensor of the given shape."""
        zeros = torch.zeros(shape, dtype=dtype, device=device)
        return cls(zeros, torch.zeros_like(zeros))

    @classmethod
    def from_params(cls, params: torch.Tensor, dim: int = 1) -> "DiagGaussian":
        """Split a network output into (mean, log_var) halves along ``dim``.

        The log-variance is clamped to [LOG_VAR_MIN, LOG_VAR_MAX] so that many
        fused experts can never overflow the precision sum.
        """
        mean, log_var = params.chunk(2, dim=dim)
        return cls(mean, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def check_finite(self) -> None:
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.log_var).all()):
            raise ContractError("DiagGaussian has non-finite mean or log_var")

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())


def _check_same_shape(*gaussians: DiagGaussian) -> None:
    shape = gaussians[0].shape
    for g in gaussians[1:]:
        if g.shape != shape:
            raise ContractError(f"shape mismatch: {tuple(shape)} vs {tuple(g.shape)}")


def kl_elementwise(q: DiagGaussian, p: DiagGaussian, validate: bool = True) -> torch.Tensor:
    """Elementwise KL[q || p]; same shape as the inputs."""
    _check_same_shape(q, p)
    if validate:
        q.check_finite()
        p.check_finite()
    diff = q.mean - p.mean
    return 0.5 * (
        torch.exp(q.log_var - p.log_var)
        + diff * diff * torch.exp(-p.log_var)
        - 1.0
        + p.log_var
        - q.log_var
    )


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL[q || p] summed over every element (a scalar tensor)."""
    return kl_elementwise(q, p).sum()


def sample(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + std * noise``."""
    if noise.shape != g.shape:
        raise ContractError(f"noise shape {tuple(noise.shape)} != distribution shape {tuple(g.shape)}")
    return g.mean + g.std * noise


def poe_fuse(
    prior: DiagGaussian,
    experts: Sequence[DiagGaussian],
    weights: Optional[Sequence[torch.Tensor]] = None,
    clamp: bool = True,
) -> DiagGaussian:
    """Product of a Gaussian prior with Gaussian experts, in closed form.

    Fused precision is the prior precision plus the expert precisions; the
    fused mean is the precision-weighted average of all means.  ``weights``
    optionally gives a 0/1 presence tensor per expert, broadcastable to the
    distribution shape, so that a batch can mix different expert subsets.
    An absent expert contributes exactly nothing.

    Log-variances are clamped to [LOG_VAR_MIN, LOG_VAR_MAX] first, which
    bounds every precision and keeps the direct sum safe in float32; pass
    ``clamp=False`` only for inputs that are already clamped (as produced by
    ``DiagGaussian.from_params``).  Precisions are accumulated in collection
    order.
    """
    experts = list(experts)
    _check_same_shape(prior, *experts)
    if weights is not None and len(weights) != len(experts):
        raise ContractError(f"{len(weights)} presence weights for {len(experts)} experts")
    if not experts:
        return DiagGaussian(prior.mean, prior.log_var)

    def _clamped(lv):
        return lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX) if clamp else lv

    precision = torch.exp(-_clamped(prior.log_var))
    weighted_mean = precision * prior.mean
    for k, e in enumerate(experts):
        p = torch.exp(-_clamped(e.log_var))
        if weights is not None:
            p = p * weights[k].to(p.dtype)
        precision = precision + p
        weighted_mean = weighted_mean + p * e.mean
    return DiagGaussian(weighted_mean / precision, -torch.log(precision))
