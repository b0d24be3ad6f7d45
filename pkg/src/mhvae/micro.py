"""A tiny linear-Gaussian model with the same interface as MHVAE.

Every modality is a 2-pixel image (shape (B, 1, 1, 2)), there is a single
latent level of ``latent_dim`` channels at 1x1, experts are affine in their
input image and decoders are affine in z.  Because everything is linear the
subset-conditional ELBO has a closed form (``analytic_elbo``), which makes
this model useful for checking the objective and its gradients.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import torch
from torch import nn

from mhvae.gaussian import DiagGaussian, kl_elementwise, poe_fuse
from mhvae.hierarchy import HierarchySpec, LatentState, top_down_infer

PIXELS = 2


class _LinearTrunk(nn.Module):
    def __init__(self, num_modalities: int, latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.experts = nn.ModuleList(nn.Linear(PIXELS, 2 * latent_dim) for _ in range(num_modalities))

    def initial_context(self, batch: int) -> torch.Tensor:
        p = self.experts[0].weight
        return p.new_zeros(batch, 1, 1, 1)

    def prior_params(self, level, context):  # single level: the prior is N(0, I)
        raise AssertionError("unreachable with one level")

    def expert_params(self, level, modality, features, context):
        out = self.experts[modality](features.flatten(1))
        reps = context.shape[0] // out.shape[0]
        if reps > 1:
            out = out.repeat(reps, 1)
        return out[:, :, None, None]

    def absorb(self, level, context, z):
        return z

    def finish(self, context):
        return context


class LinearGaussianModel(nn.Module):
    def __init__(self, num_modalities: int = 2, latent_dim: int = 4):
        super().__init__()
        self.num_modalities = num_modalities
        self.spec = HierarchySpec(1, ((1, 1),), (latent_dim,))
        self.trunk = _LinearTrunk(num_modalities, latent_dim)
        self.decoders = nn.ModuleList(nn.Linear(latent_dim, PIXELS) for _ in range(num_modalities))

    def encode_all(self, images: Sequence[Optional[torch.Tensor]]) -> List[Optional[List[torch.Tensor]]]:
        return [None if x is None else [x.reshape(x.shape[0], PIXELS)] for x in images]

    def infer(self, features, mask, batch=None, generator=None, noise_scale: float = 1.0) -> LatentState:
        return top_down_infer(self.spec, self.trunk, features, mask, batch, generator, noise_scale)

    def decode_images(self, state: LatentState) -> List[torch.Tensor]:
        z = state.context.flatten(1)
        return [dec(z).view(-1, 1, 1, PIXELS) for dec in self.decoders]

    def forward(self, images, mask, generator=None, noise_scale: float = 1.0):
        state = self.infer(self.encode_all(images), mask, images[0].shape[0], generator, noise_scale)
        return self.decode_images(state), state

    def posterior(self, images: Sequence[torch.Tensor], subset: Sequence[int]) -> DiagGaussian:
        """Closed-form fused posterior for one subset, shape (B, latent_dim)."""
        B = images[0].shape[0]
        d = self.trunk.latent_dim
        dtype = self.decoders[0].weight.dtype
        prior = DiagGaussian(torch.zeros(B, d, dtype=dtype), torch.zeros(B, d, dtype=dtype))
        experts = []
        for i in subset:
            out = self.trunk.experts[i](images[i].reshape(B, PIXELS))
            experts.append(DiagGaussian.from_params(out, dim=1))
        return poe_fuse(prior, experts, clamp=False)

    def analytic_elbo(self, images: Sequence[torch.Tensor], subset: Sequence[int], variance: float = 1.0) -> torch.Tensor:
        """Batch mean of E_q[sum_i log N(x_i; W_i z + b_i, variance I)] - KL(q || N(0, I)),
        with q the fused posterior of ``subset``; every modality is scored."""
        q = self.posterior(images, subset)
        B = q.mean.shape[0]
        prior = DiagGaussian(torch.zeros_like(q.mean), torch.zeros_like(q.mean))
        expected_ll = 0.0
        for i, dec in enumerate(self.decoders):
            x = images[i].reshape(B, PIXELS)
            resid = x - dec(q.mean)
            trace = (dec.weight**2 * q.var[:, None, :]).sum(-1)  # diag of W Sigma W^T
            sq = (resid**2 + trace).sum(1)
            expected_ll = expected_ll - 0.5 * sq / variance - 0.5 * PIXELS * math.log(2 * math.pi * variance)
        kl = kl_elementwise(q, prior).sum(1)
        return (expected_ll - kl).mean()
