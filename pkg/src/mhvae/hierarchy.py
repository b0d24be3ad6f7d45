"""The latent ladder: geometry, subset enumeration and subset-conditional
top-down inference.

Levels are always listed coarsest first: index 0 is the 1x1 global code
(z_L), the last index is the finest latent (z_1).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import torch

from mhvae.errors import ContractError
from mhvae.gaussian import DiagGaussian, poe_fuse, sample

CHANNEL_FLOOR = 8


@dataclass(frozen=True)
class HierarchySpec:
    num_levels: int
    spatial: Tuple[Tuple[int, int], ...]
    channels: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "spatial", tuple(tuple(int(v) for v in s) for s in self.spatial))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @classmethod
    def build(cls, num_levels: int = 7, top_channels: int = 256, floor: int = CHANNEL_FLOOR) -> "HierarchySpec":
        """Ladder starting at 1x1 with ``top_channels``; each finer level doubles
        the spatial extent and halves the channels down to ``floor``."""
        spatial = tuple((2**k, 2**k) for k in range(num_levels))
        channels = tuple(max(top_channels >> k, min(floor, top_channels)) for k in range(num_levels))
        return cls(num_levels, spatial, channels)

    @property
    def finest(self) -> Tuple[int, int]:
        return self.spatial[-1]

    def level_shape(self, level: int, batch: int) -> Tuple[int, int, int, int]:
        h, w = self.spatial[level]
        return (batch, self.channels[level], h, w)

    def to_dict(self) -> dict:
        return {
            "num_levels": self.num_levels,
            "spatial": [list(s) for s in self.spatial],
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchySpec":
        return cls(int(d["num_levels"]), tuple(tuple(s) for s in d["spatial"]), tuple(d["channels"]))


def validate_spec(spec: HierarchySpec) -> None:
    """Raise ContractError naming the first violated ladder invariant."""
    L = spec.num_levels
    if L < 1:
        raise ContractError(f"num_levels must be >= 1, got {L}")
    if len(spec.spatial) != L:
        raise ContractError(f"expected {L} spatial extents, got {len(spec.spatial)}")
    if len(spec.channels) != L:
        raise ContractError(f"expected {L} channel counts, got {len(spec.channels)}")
    if any(len(s) != 2 for s in spec.spatial):
        raise ContractError("each spatial extent must be a (height, width) pair")
    if spec.spatial[0] != (1, 1):
        raise ContractError(f"coarsest level must be 1x1, got {spec.spatial[0]}")
    for k in range(1, L):
        (h0, w0), (h1, w1) = spec.spatial[k - 1], spec.spatial[k]
        if (h1, w1) != (2 * h0, 2 * w0):
            raise ContractError(
                f"non-doubling spatial extent between levels {k - 1} and {k}: {(h0, w0)} -> {(h1, w1)}"
            )
    if any(c < 1 for c in spec.channels):
        raise ContractError("channel counts must be positive")
    for k in range(1, L):
        if spec.channels[k] > spec.channels[k - 1]:
            raise ContractError(
                f"channel counts must be non-increasing coarsest to finest: "
                f"{spec.channels[k - 1]} -> {spec.channels[k]} at level {k}"
            )


def enumerate_subsets(num_modalities: int) -> List[Tuple[int, ...]]:
    """All non-empty subsets of modality indices (0-based), ordered by size
    then lexicographically."""
    if num_modalities < 1:
        raise ContractError(f"need at least one modality, got {num_modalities}")
    out = []
    for size in range(1, num_modalities + 1):
        out.extend(itertools.combinations(range(num_modalities), size))
    return out


def subset_label(subset: Sequence[int], names: Optional[Sequence[str]] = None) -> str:
    if names is None:
        return "+".join(str(i) for i in subset)
    return "+".join(names[i] for i in subset)


@dataclass
class LevelState:
    prior: DiagGaussian
    posterior: DiagGaussian
    sample: torch.Tensor
    noise: torch.Tensor


@dataclass
class LatentState:
    levels: List[LevelState] = field(default_factory=list)
    # trunk features at image resolution, consumed by the image decoders
    context: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k) -> LevelState:
        return self.levels[k]

    @property
    def samples(self) -> List[torch.Tensor]:
        return [lv.sample for lv in self.levels]


class Trunk(Protocol):
    """What top_down_infer needs from the shared top-down network."""

    def initial_context(self, batch: int) -> torch.Tensor: ...

    def prior_params(self, level: int, context: torch.Tensor) -> torch.Tensor: ...

    def expert_params(self, level: int, modality: int, features: torch.Tensor, context: torch.Tensor) -> torch.Tensor: ...

    def absorb(self, level: int, context: torch.Tensor, z: torch.Tensor) -> torch.Tensor: ...

    def finish(self, context: torch.Tensor) -> torch.Tensor: ...


MaskLike = Union[Sequence[bool], torch.Tensor]


def _as_batch_mask(mask: MaskLike, batch: int, num_modalities: int) -> torch.Tensor:
    m = torch.as_tensor(mask, dtype=torch.bool)
    if m.dim() == 1:
        m = m.unsqueeze(0).expand(batch, -1)
    if m.shape != (batch, num_modalities):
        raise ContractError(f"mask shape {tuple(m.shape)} incompatible with batch {batch} x {num_modalities} modalities")
    return m


def draw_noise(shape, like: torch.Tensor, generator: Optional[torch.Generator], scale: float) -> torch.Tensor:
    if scale == 0.0:
        return torch.zeros(shape, dtype=like.dtype, device=like.device)
    eps = torch.randn(shape, generator=generator, dtype=like.dtype, device=like.device)
    return eps if scale == 1.0 else eps * scale


def top_down_infer(
    spec: HierarchySpec,
    trunk: Trunk,
    features: Sequence[Optional[Sequence[torch.Tensor]]],
    mask: MaskLike,
    batch: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    noise_scale: float = 1.0,
) -> LatentState:
    """Run the ladder from the 1x1 code down to the finest latent.

    ``features[i]`` is modality i's encoder pyramid (coarsest first) or None
    when that modality is absent everywhere.  A pyramid may hold fewer rows
    than ``batch`` when ``batch`` is a whole multiple of it: the rows are then
    tiled, which lets several subsets of one minibatch share one encoding.  ``mask`` is either one boolean
    per modality or a (batch, M) boolean tensor giving a subset per sample.
    At every level the posterior is the product of that level's prior with
    the experts of the present modalities; with no modality present it is
    the prior itself.  One sample per level is drawn with ``noise_scale``
    times standard normal noise (0 gives the posterior means).
    """
    M = len(features)
    if batch is None:
        present = [f for f in features if f is not None]
        if not present:
            raise ContractError("batch size required when no modality features are given")
        batch = present[0][0].shape[0]
    m = _as_batch_mask(mask, batch, M)
    any_present = m.any(dim=0).tolist()
    for i in range(M):
        if any_present[i] and features[i] is None:
            raise ContractError(f"modality {i} is in the mask but has no encoder features")
        if features[i] is not None:
            if len(features[i]) != spec.num_levels:
                raise ContractError(f"modality {i} pyramid has {len(features[i])} levels, expected {spec.num_levels}")
            rows = features[i][0].shape[0]
            if batch % rows:
                raise ContractError(f"modality {i} features have {rows} rows, not a divisor of batch {batch}")

    state = LatentState()
    context = trunk.initial_context(batch)
    for k in range(spec.num_levels):
        shape = spec.level_shape(k, batch)
        if k == 0:
            prior = DiagGaussian.standard(shape, dtype=context.dtype, device=context.device)
        else:
            prior = DiagGaussian.from_params(trunk.prior_params(k, context))
        experts, weights = [], []
        for i in range(M):
            if not any_present[i]:
                continue
            experts.append(DiagGaussian.from_params(trunk.expert_params(k, i, features[i][k], context)))
            if experts[-1].shape != shape:
                raise ContractError(f"modality {i} expert at level {k} has shape {tuple(experts[-1].shape)}, expected {shape}")
            weights.append(m[:, i].view(batch, 1, 1, 1).to(context.device))
        if experts and bool(m[:, any_present].all()):
            weights = None
        posterior = poe_fuse(prior, experts, weights, clamp=False)
        if posterior.shape != shape:
            raise ContractError(f"level {k} posterior shape {tuple(posterior.shape)} != {shape}")
        noise = draw_noise(shape, context, generator, noise_scale)
        z = sample(posterior, noise)
        state.levels.append(LevelState(prior, posterior, z, noise))
        context = trunk.absorb(k, context, z)
    state.context = trunk.finish(context)
    return state
