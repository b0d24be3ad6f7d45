"""Encoders, shared top-down trunk, image decoders and patch discriminators.

Resolutions are indexed by *stage*: stage s works at 2**s x 2**s, so stage 0
is the 1x1 code and stage S = log2(image_size) is full resolution.  Latent
level k of the ladder lives at stage k.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from mhvae.errors import ContractError
from mhvae.hierarchy import HierarchySpec, LatentState, MaskLike, top_down_infer, validate_spec


@dataclass
class ArchConfig:
    image_size: int = 64
    base_width: int = 12
    max_width: int = 64
    cells_per_stage: int = 1
    expansion: int = 4
    se_reduction: int = 8
    decoder_width: int = 8
    decoder_blocks: int = 5
    decoder_stride: int = 2
    head_kernel: int = 1
    disc_width: int = 16
    disc_layers: int = 3

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.image_size)) + 1

    def width(self, stage: int) -> int:
        top = self.num_stages - 1
        return min(self.max_width, self.base_width * 2 ** (top - stage))

    def to_dict(self) -> dict:
        return asdict(self)


def check_geometry(spec: HierarchySpec, arch: ArchConfig) -> None:
    validate_spec(spec)
    n = arch.image_size
    if n < 2 or n & (n - 1):
        raise ContractError(f"image_size must be a power of two, got {n}")
    if spec.finest[0] > n:
        raise ContractError(f"finest latent {spec.finest} is larger than the {n}x{n} image")


def _kernel(stage: int) -> int:
    # a 3x3 kernel on a 1x1 map only ever uses its centre tap
    return 1 if stage == 0 else 3


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.silu(self.fc1(s))))
        return x * s[:, :, None, None]


class ResidualCell(nn.Module):
    """Inverted-residual bottleneck: 1x1 expand, depthwise conv, 1x1 project,
    squeeze-excitation, swish activations."""

    def __init__(self, channels: int, stage: int, expansion: int = 4, se_reduction: int = 8):
        super().__init__()
        hidden = channels * expansion
        k = _kernel(stage)
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, k, padding=k // 2, groups=hidden)
        self.project = nn.Conv2d(hidden, channels, 1)
        self.se = SqueezeExcite(channels, se_reduction)

    def forward(self, x):
        h = F.silu(self.expand(x))
        h = F.silu(self.depthwise(h))
        h = self.se(self.project(h))
        return x + 0.1 * h


def _cells(channels: int, stage: int, arch: ArchConfig) -> nn.Sequential:
    return nn.Sequential(
        *[ResidualCell(channels, stage, arch.expansion, arch.se_reduction) for _ in range(arch.cells_per_stage)]
    )


class Encoder(nn.Module):
    """Bottom-up path for one modality: image -> feature map at every stage."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        S = arch.num_stages - 1
        self.stem = nn.Conv2d(1, arch.width(S), 3, padding=1)
        self.cells = nn.ModuleList([_cells(arch.width(s), s, arch) for s in range(arch.num_stages)])
        # down[s] maps stage s to stage s-1; kernel 2 stride 2 touches every tap
        self.down = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(arch.width(s), arch.width(s - 1), 2, stride=2) for s in range(1, S + 1)]
        )

    def forward(self, x) -> List[torch.Tensor]:
        S = len(self.cells) - 1
        feats = [None] * (S + 1)
        h = self.stem(x)
        for s in range(S, -1, -1):
            h = self.cells[s](h)
            feats[s] = h
            if s > 0:
                h = F.silu(self.down[s](h))
        return feats


class TopDownTrunk(nn.Module):
    """Shared expansive path.  Holds the prior heads (levels below the top)
    and the per-modality posterior expert heads, which see encoder features
    concatenated with the trunk context."""

    def __init__(self, spec: HierarchySpec, arch: ArchConfig, num_modalities: int):
        super().__init__()
        self.spec = spec
        self.arch = arch
        S = arch.num_stages - 1
        L = spec.num_levels
        self.top = nn.Parameter(torch.randn(1, arch.width(0), 1, 1) * 0.1)
        self.prior_heads = nn.ModuleList(
            [nn.Identity()]
            + [_head(arch.width(k), 2 * spec.channels[k], k, arch) for k in range(1, L)]
        )
        # expert head = conv over [features, context], split into two convs
        # so the concatenation is never materialized
        self.expert_heads = nn.ModuleList(
            [nn.ModuleList([_head(arch.width(k), 2 * spec.channels[k], k, arch) for k in range(L)]) for _ in range(num_modalities)]
        )
        self.expert_context = nn.ModuleList(
            [
                nn.ModuleList([_head(arch.width(k), 2 * spec.channels[k], k, arch, bias=False) for k in range(L)])
                for _ in range(num_modalities)
            ]
        )
        self.z_proj = nn.ModuleList([nn.Conv2d(spec.channels[k], arch.width(k), 1) for k in range(L)])
        self.cells = nn.ModuleList([_cells(arch.width(s), s, arch) for s in range(S + 1)])
        self.up = nn.ModuleList([nn.Conv2d(arch.width(s), arch.width(s + 1), 1) for s in range(S)])
        for head in self.prior_heads[1:]:
            _shrink(head)
        for heads in list(self.expert_heads) + list(self.expert_context):
            for head in heads:
                _shrink(head)

    def _upsample(self, stage: int, h):
        return self.up[stage](F.interpolate(h, scale_factor=2, mode="nearest"))

    def initial_context(self, batch: int) -> torch.Tensor:
        return self.top.expand(batch, -1, -1, -1)

    def prior_params(self, level: int, context):
        return self.prior_heads[level](context)

    def expert_params(self, level: int, modality: int, features, context):
        own = self.expert_heads[modality][level](features)
        if own.shape[0] != context.shape[0]:
            own = own.repeat(context.shape[0] // own.shape[0], 1, 1, 1)
        return own + self.expert_context[modality][level](context)

    def absorb(self, level: int, context, z):
        h = self.cells[level](context + self.z_proj[level](z))
        if level < len(self.cells) - 1:
            h = self._upsample(level, h)
        return h

    def finish(self, context):
        S = len(self.cells) - 1
        h = context
        for s in range(self.spec.num_levels, S + 1):
            h = self.cells[s](h)
            if s < S:
                h = self._upsample(s, h)
        return h


def _head(cin: int, cout: int, stage: int, arch: ArchConfig, bias: bool = True) -> nn.Conv2d:
    k = min(_kernel(stage), arch.head_kernel)
    return nn.Conv2d(cin, cout, k, padding=k // 2, bias=bias)


def _shrink(conv: nn.Conv2d, scale: float = 0.1) -> None:
    # start near N(mean=0, log_var=0) without cutting gradients upstream
    with torch.no_grad():
        conv.weight.mul_(scale)
        if conv.bias is not None:
            conv.bias.zero_()


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class ImageDecoder(nn.Module):
    """Full-resolution trunk features -> one image in [-1, 1].

    With ``stride=2`` the residual blocks run at half resolution and the
    output conv sees their upsampled result next to the full-resolution
    features, which keeps pixel-level detail at a quarter of the cost.
    """

    def __init__(self, in_channels: int, width: int, blocks: int = 5, stride: int = 1):
        super().__init__()
        self.stride = stride
        if stride == 1:
            self.inp = nn.Conv2d(in_channels, width, 3, padding=1)
            out_in = width
        else:
            self.inp = nn.Conv2d(in_channels, width, stride, stride=stride)
            out_in = width + in_channels
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.out = nn.Conv2d(out_in, 1, 3, padding=1)

    def forward(self, h):
        y = F.silu(self.blocks(self.inp(h)))
        if self.stride != 1:
            y = torch.cat([F.interpolate(y, scale_factor=self.stride, mode="nearest"), h], dim=1)
        return torch.tanh(self.out(y))


class PatchDiscriminator(nn.Module):
    """Convolutional critic returning one real/fake logit per image patch."""

    def __init__(self, width: int = 16, layers: int = 3):
        super().__init__()
        mods: list = []
        cin = 1
        for n in range(layers):
            cout = width * 2**n
            mods += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        mods.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class MHVAE(nn.Module):
    """Multi-modal hierarchical VAE generator: one encoder and one image
    decoder per modality around a shared top-down trunk."""

    def __init__(self, spec: HierarchySpec, arch: ArchConfig, num_modalities: int = 2):
        super().__init__()
        check_geometry(spec, arch)
        if num_modalities < 1:
            raise ContractError("need at least one modality")
        self.spec = spec
        self.arch = arch
        self.num_modalities = num_modalities
        S = arch.num_stages - 1
        self.encoders = nn.ModuleList([Encoder(arch) for _ in range(num_modalities)])
        self.trunk = TopDownTrunk(spec, arch, num_modalities)
        self.decoders = nn.ModuleList(
            [ImageDecoder(arch.width(S), arch.decoder_width, arch.decoder_blocks, arch.decoder_stride) for _ in range(num_modalities)]
        )

    def check_image(self, image: torch.Tensor) -> None:
        n = self.arch.image_size
        if image.dim() != 4 or image.shape[1:] != (1, n, n):
            raise ContractError(f"expected images of shape (B, 1, {n}, {n}), got {tuple(image.shape)}")
        if not torch.isfinite(image).all() or image.abs().max() > 1.0 + 1e-6:
            raise ContractError("image values must be finite and within [-1, 1]")

    def encode(self, modality: int, image: torch.Tensor) -> List[torch.Tensor]:
        """Feature pyramid for the ladder levels, coarsest first."""
        if not 0 <= modality < self.num_modalities:
            raise ContractError(f"modality index {modality} out of range")
        self.check_image(image)
        feats = self.encoders[modality](image)
        return feats[: self.spec.num_levels]

    def encode_all(self, images: Sequence[Optional[torch.Tensor]]) -> List[Optional[List[torch.Tensor]]]:
        if len(images) != self.num_modalities:
            raise ContractError(f"expected {self.num_modalities} image slots, got {len(images)}")
        return [None if x is None else self.encode(i, x) for i, x in enumerate(images)]

    def infer(
        self,
        features: Sequence[Optional[Sequence[torch.Tensor]]],
        mask: MaskLike,
        batch: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        noise_scale: float = 1.0,
    ) -> LatentState:
        return top_down_infer(self.spec, self.trunk, features, mask, batch, generator, noise_scale)

    def decode_images(self, state: LatentState) -> List[torch.Tensor]:
        """Decode every modality from one realized ladder."""
        if len(state) != self.spec.num_levels:
            raise ContractError(f"latent state has {len(state)} levels, expected {self.spec.num_levels}")
        batch = state[0].sample.shape[0]
        for k, lv in enumerate(state.levels):
            if tuple(lv.sample.shape) != self.spec.level_shape(k, batch):
                raise ContractError(
                    f"level {k} sample shape {tuple(lv.sample.shape)} != {self.spec.level_shape(k, batch)}"
                )
        n = self.arch.image_size
        if state.context is None or state.context.shape[-2:] != (n, n):
            raise ContractError("latent state carries no full-resolution trunk context")
        return [dec(state.context) for dec in self.decoders]

    def forward(self, images, mask, generator=None, noise_scale: float = 1.0):
        """Encode the present modalities, infer, and decode all modalities."""
        m = torch.as_tensor(mask, dtype=torch.bool)
        present = m if m.dim() == 1 else m.any(dim=0)
        images = [x if bool(present[i]) else None for i, x in enumerate(images)]
        batch = next(x.shape[0] for x in images if x is not None)
        state = self.infer(self.encode_all(images), mask, batch, generator, noise_scale)
        return self.decode_images(state), state

    @torch.no_grad()
    def generate(self, batch: int, generator=None, noise_scale: float = 1.0) -> List[torch.Tensor]:
        """Unconditional samples from the prior chain."""
        state = self.infer([None] * self.num_modalities, [False] * self.num_modalities, batch, generator, noise_scale)
        return self.decode_images(state)


class Discriminators(nn.Module):
    """One patch discriminator per modality."""

    def __init__(self, arch: ArchConfig, num_modalities: int):
        super().__init__()
        self.arch = arch
        self.nets = nn.ModuleList([PatchDiscriminator(arch.disc_width, arch.disc_layers) for _ in range(num_modalities)])

    def __len__(self):
        return len(self.nets)

    def discriminate(self, modality: int, image: torch.Tensor) -> torch.Tensor:
        n = self.arch.image_size
        if image.dim() != 4 or image.shape[1:] != (1, n, n):
            raise ContractError(f"expected images of shape (B, 1, {n}, {n}), got {tuple(image.shape)}")
        return self.nets[modality](image)

    def forward(self, modality: int, image):
        return self.discriminate(modality, image)
