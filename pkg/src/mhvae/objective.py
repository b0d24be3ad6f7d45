"""Training objective: subset-specific losses and their average over subsets.

For one subset of input modalities the loss is

    sum_i lambda_l1 * L1(decoded_i, x_i)            (every modality, present or not)
  + sum_l kl_weight_l * KL_l * kl_scale             (one-sample estimate per level)
  + sum_i lambda_gan * GAN(decoded_i)               (only after the warm-up)

and the total is the arithmetic mean over all non-empty subsets.  KL_l is
the KL divergence summed over the latent elements of one sample and averaged
over the batch.  With ``kl_per_pixel`` the KL is divided by the number of
pixels of one image (kl_scale = 1 / (H * W)): the mean-reduced L1 is a
per-pixel quantity, and this keeps the two on the same per-pixel footing.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from mhvae.errors import ContractError
from mhvae.gaussian import kl_elementwise
from mhvae.hierarchy import enumerate_subsets, subset_label


@dataclass
class LossWeights:
    lambda_l1: float = 100.0
    lambda_gan: float = 1.0
    kl_weights: Optional[List[float]] = None  # one per level, coarsest first; None = all 1
    gan_warmup_fraction: float = 0.8
    decoder_sigma: float = 1.0  # variance of the Gaussian likelihood; only used when reconstruction="gaussian"
    kl_per_pixel: bool = True
    reconstruction: str = "l1"  # "l1" (training default) or "gaussian" (exact ELBO, for checks)

    def validate(self, num_levels: int) -> None:
        if self.lambda_l1 < 0 or self.lambda_gan < 0:
            raise ContractError("loss weights must be non-negative")
        if not 0.0 <= self.gan_warmup_fraction <= 1.0:
            raise ContractError("gan_warmup_fraction must be within [0, 1]")
        if self.decoder_sigma <= 0:
            raise ContractError("decoder_sigma must be positive")
        if self.kl_weights is not None:
            if len(self.kl_weights) != num_levels:
                raise ContractError(f"{len(self.kl_weights)} KL weights for {num_levels} levels")
            if any(w < 0 for w in self.kl_weights):
                raise ContractError("KL weights must be non-negative")
        if self.reconstruction not in ("l1", "gaussian"):
            raise ContractError(f"unknown reconstruction loss {self.reconstruction!r}")

    def level_weights(self, num_levels: int) -> List[float]:
        return [1.0] * num_levels if self.kl_weights is None else [float(w) for w in self.kl_weights]

    def gan_active(self, epoch_fraction: float) -> bool:
        return self.lambda_gan > 0 and epoch_fraction >= self.gan_warmup_fraction

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SubsetTerms:
    """Itemized loss of one subset; every entry is a scalar tensor."""

    subset: Tuple[int, ...]
    recon: List[torch.Tensor]
    kl: List[torch.Tensor]
    gan: List[torch.Tensor]
    total: torch.Tensor


@dataclass
class LossReport:
    subsets: List[SubsetTerms]
    total: torch.Tensor
    recon_weight: float
    kl_weights: List[float]  # already multiplied by the KL scale
    gan_weight: float  # 0 when the GAN term is inactive
    decoded: Optional[List[torch.Tensor]] = field(default=None, repr=False)
    discriminator: Optional[torch.Tensor] = None
    reconstruction: str = "l1"

    def recompute_total(self) -> torch.Tensor:
        parts = [subset_total(t, self.recon_weight, self.kl_weights, self.gan_weight) for t in self.subsets]
        return torch.stack(parts).mean()

    def named_terms(self, modality_names: Sequence[str]) -> List[Tuple[str, str, float]]:
        """Flat (subset, term, value) rows, e.g. for the loss-curve CSV."""
        rows = []
        f = lambda v: float(v.detach())
        recon = "l1" if self.reconstruction == "l1" else "nll"
        for t in self.subsets:
            label = subset_label(t.subset, modality_names)
            for i, v in enumerate(t.recon):
                rows.append((label, f"{recon}_{modality_names[i]}", f(v)))
            for k, v in enumerate(t.kl):
                rows.append((label, f"kl_{k}", f(v)))
            for i, v in enumerate(t.gan):
                rows.append((label, f"gan_{modality_names[i]}", f(v)))
            rows.append((label, "total", f(t.total)))
        rows.append(("all", "total", f(self.total)))
        if self.discriminator is not None:
            rows.append(("all", "discriminator", f(self.discriminator)))
        return rows


def subset_total(t: SubsetTerms, recon_weight: float, kl_weights: Sequence[float], gan_weight: float) -> torch.Tensor:
    total = recon_weight * torch.stack(t.recon).sum()
    total = total + sum(w * v for w, v in zip(kl_weights, t.kl))
    if gan_weight:
        total = total + gan_weight * torch.stack(t.gan).sum()
    return total


def l1_loss(decoded: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean absolute error."""
    if decoded.shape != target.shape:
        raise ContractError(f"decoded {tuple(decoded.shape)} vs target {tuple(target.shape)}")
    return (decoded - target).abs().mean()


def gaussian_nll(decoded: torch.Tensor, target: torch.Tensor, variance: float) -> torch.Tensor:
    """-log N(target; decoded, variance * I), summed over pixels, mean over batch."""
    if decoded.shape != target.shape:
        raise ContractError(f"decoded {tuple(decoded.shape)} vs target {tuple(target.shape)}")
    sq = (decoded - target) ** 2
    per_pixel = 0.5 * (sq / variance + math.log(2 * math.pi * variance))
    return per_pixel.flatten(1).sum(1).mean()


def generator_gan_loss(logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: BCE of fake logits against 'real'."""
    return F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))


def discriminator_loss(real_images: Sequence[torch.Tensor], fake_images: Sequence[torch.Tensor], discriminators) -> torch.Tensor:
    """Sum over modalities of the patch BCE on real (label 1) and fake (label 0).

    Fakes are detached here so no gradient reaches the generator.
    """
    if len(real_images) != len(fake_images) or len(real_images) != len(discriminators):
        raise ContractError("need one real and one fake batch per discriminator")
    total = 0.0
    for i, (real, fake) in enumerate(zip(real_images, fake_images)):
        if real.shape[1:] != fake.shape[1:]:
            raise ContractError(f"modality {i}: real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
        real_logits = discriminators.discriminate(i, real)
        fake_logits = discriminators.discriminate(i, fake.detach())
        total = total + F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        total = total + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return total


def evaluate_subsets(
    batch: Sequence[torch.Tensor],
    subsets: Sequence[Sequence[int]],
    model,
    weights: LossWeights,
    epoch_fraction: float = 0.0,
    discriminators=None,
    generator: Optional[torch.Generator] = None,
) -> LossReport:
    """Losses for several subsets of one minibatch in a single pass.

    All modalities are encoded once; the subsets are tiled along the batch
    axis so the top-down pass and the decoders run once for all of them.
    """
    M = model.num_modalities
    if len(batch) != M:
        raise ContractError(f"batch has {len(batch)} modalities, model expects {M}")
    subsets = [tuple(s) for s in subsets]
    if not subsets or any(len(s) == 0 for s in subsets):
        raise ContractError("every subset must be non-empty")
    if any(i < 0 or i >= M for s in subsets for i in s):
        raise ContractError(f"subset index out of range for {M} modalities")
    spec = model.spec
    weights.validate(spec.num_levels)
    B = batch[0].shape[0]
    S = len(subsets)

    needed = sorted({i for s in subsets for i in s})
    features = model.encode_all([batch[i] if i in needed else None for i in range(M)])
    mask = torch.tensor([[i in s for i in range(M)] for s in subsets], dtype=torch.bool)
    mask = mask.repeat_interleave(B, dim=0)
    state = model.infer(features, mask, B * S, generator, 1.0)
    decoded = model.decode_images(state)

    gan_on = weights.gan_active(epoch_fraction)
    if gan_on and discriminators is None:
        raise ContractError("GAN term is active but no discriminators were given")
    gan_logits = [discriminators.discriminate(i, decoded[i]) for i in range(M)] if gan_on else None

    kl_levels = []
    for lv in state.levels:
        kl = kl_elementwise(lv.posterior, lv.prior, validate=False)
        kl_levels.append(kl.flatten(1).sum(1))  # per sample

    if weights.reconstruction == "gaussian":
        recon_weight = 1.0
    else:
        recon_weight = weights.lambda_l1
    if weights.kl_per_pixel:
        n_pix = batch[0][0].numel()
        kl_scale = 1.0 / n_pix
    else:
        kl_scale = 1.0
    kl_w = [w * kl_scale for w in weights.level_weights(spec.num_levels)]
    gan_w = weights.lambda_gan if gan_on else 0.0

    zero = decoded[0].new_zeros(())
    terms = []
    for n, s in enumerate(subsets):
        rows = slice(n * B, (n + 1) * B)
        recon = []
        for i in range(M):
            if weights.reconstruction == "gaussian":
                recon.append(gaussian_nll(decoded[i][rows], batch[i], weights.decoder_sigma))
            else:
                recon.append(l1_loss(decoded[i][rows], batch[i]))
        kl = [k[rows].mean() for k in kl_levels]
        gan = [generator_gan_loss(g[rows]) for g in gan_logits] if gan_on else [zero] * M
        t = SubsetTerms(s, recon, kl, gan, zero)
        t.total = subset_total(t, recon_weight, kl_w, gan_w)
        terms.append(t)
    total = torch.stack([t.total for t in terms]).mean()
    return LossReport(terms, total, recon_weight, kl_w, gan_w, decoded=decoded, reconstruction=weights.reconstruction)


def subset_loss(batch, subset, model, weights: LossWeights, epoch_fraction: float = 0.0, discriminators=None, generator=None) -> SubsetTerms:
    """Itemized loss for one subset (inference sees only ``subset``; every
    modality is decoded and scored)."""
    if len(tuple(subset)) == 0:
        raise ContractError("subset must be non-empty")
    return evaluate_subsets(batch, [subset], model, weights, epoch_fraction, discriminators, generator).subsets[0]


def total_loss(
    batch,
    model,
    weights: LossWeights,
    epoch_fraction: float = 0.0,
    discriminators=None,
    generator: Optional[torch.Generator] = None,
    subsets: Optional[Sequence[Sequence[int]]] = None,
) -> LossReport:
    """Mean of the subset losses over every non-empty subset (or over the
    given ``subsets``, e.g. one randomly drawn subset for large M)."""
    if subsets is None:
        subsets = enumerate_subsets(model.num_modalities)
    return evaluate_subsets(batch, subsets, model, weights, epoch_fraction, discriminators, generator)
