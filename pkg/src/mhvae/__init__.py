"""Multi-modal hierarchical VAE for synthesizing missing image modalities."""

from mhvae.errors import CheckpointError, ContractError
from mhvae.gaussian import DiagGaussian, kl_divergence, poe_fuse, sample
from mhvae.hierarchy import HierarchySpec, LatentState, enumerate_subsets, top_down_infer, validate_spec

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ContractError",
    "DiagGaussian",
    "HierarchySpec",
    "LatentState",
    "enumerate_subsets",
    "kl_divergence",
    "poe_fuse",
    "sample",
    "top_down_infer",
    "validate_spec",
]
