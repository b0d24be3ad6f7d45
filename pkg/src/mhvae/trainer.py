"""Optimization loop, checkpoints, resumption and image synthesis."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from mhvae.data import DatasetManifest, denormalize, iterate_batches, load_manifest, normalize, write_png16
from mhvae.errors import CheckpointError, ContractError
from mhvae.hierarchy import HierarchySpec, enumerate_subsets, subset_label
from mhvae.networks import ArchConfig, Discriminators, MHVAE, check_geometry
from mhvae.objective import LossReport, LossWeights, discriminator_loss, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mhvae-checkpoint"
CHECKPOINT_VERSION = 1
CURVES_HEADER = ["epoch", "subset", "term", "value"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_dir: str = "data/toy"
    out_dir: str = "runs/toy"
    epochs: int = 60
    batch_size: int = 16
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 10
    subset_sampling: str = "all"  # "all" subsets every iteration, or one "random" subset
    device: str = "cpu"
    hierarchy: HierarchySpec = field(default_factory=lambda: HierarchySpec.build(7))
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ContractError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("Adam betas must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ContractError("checkpoint_every must be >= 0")
        if self.subset_sampling not in ("all", "random"):
            raise ContractError(f"unknown subset_sampling {self.subset_sampling!r}")
        check_geometry(self.hierarchy, self.arch)
        self.loss.validate(self.hierarchy.num_levels)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("hierarchy", "arch", "loss")}
        d["hierarchy"] = self.hierarchy.to_dict()
        d["arch"] = self.arch.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hierarchy = HierarchySpec.from_dict(d.pop("hierarchy"))
        arch = ArchConfig(**d.pop("arch"))
        loss = LossWeights(**d.pop("loss"))
        return cls(hierarchy=hierarchy, arch=arch, loss=loss, **d)


# --------------------------------------------------------------------------
# checkpoints


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def write_checkpoint(path, state: dict) -> Path:
    """Single-file container: versioned header, sha256 digest, payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    container = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sha256": _digest(payload), "payload": payload}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(container, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        container = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint container ({exc})") from exc
    if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an mhvae checkpoint")
    if container.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {container.get('version')!r}")
    payload = container["payload"]
    if _digest(payload) != container.get("sha256"):
        raise CheckpointError(f"{path}: digest mismatch, checkpoint is corrupted")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def load_model(path, device: str = "cpu") -> Tuple[MHVAE, TrainConfig, dict]:
    """Rebuild the generator stored in a checkpoint."""
    state = read_checkpoint(path)
    config = TrainConfig.from_dict(state["config"])
    model = MHVAE(config.hierarchy, config.arch, state["num_modalities"])
    model.load_state_dict(state["model"])
    model.to(device).eval()
    return model, config, state


# --------------------------------------------------------------------------
# training


def _to_device(batch: np.ndarray, device) -> List[torch.Tensor]:
    t = torch.from_numpy(batch).to(device)
    return [t[:, i : i + 1].contiguous(memory_format=torch.channels_last) for i in range(t.shape[1])]


def _check_finite(report: LossReport, names: Sequence[str], epoch: int, step: int) -> None:
    if torch.isfinite(report.total):
        return
    for subset, term, value in report.named_terms(names):
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss term {term!r} for subset {subset} at epoch {epoch}, step {step}")
    raise TrainingDiverged(f"non-finite total loss at epoch {epoch}, step {step}")


class Trainer:
    """Owns the generator, the discriminators, both optimizers and the noise
    generator for one run."""

    def __init__(self, config: TrainConfig, manifest: Optional[DatasetManifest] = None):
        config.validate()
        self.config = config
        self.device = torch.device(config.device)
        if manifest is None:
            manifest = load_manifest(config.data_dir)
        self.names = list(manifest.modalities)
        train = manifest.split("train")
        if not train.samples:
            raise ContractError(f"dataset {manifest.root} has no training samples")
        if (train.height, train.width) != (config.arch.image_size, config.arch.image_size):
            raise ContractError(
                f"dataset images are {train.height}x{train.width}, model expects {config.arch.image_size}"
            )
        self.data = train.load_array()
        self.M = train.num_modalities

        torch.manual_seed(config.seed)
        self.model = MHVAE(config.hierarchy, config.arch, self.M).to(self.device, memory_format=torch.channels_last)
        self.discriminators = Discriminators(config.arch, self.M).to(self.device, memory_format=torch.channels_last)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=config.lr_generator, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminators.parameters(), lr=config.lr_discriminator, betas=betas)
        self.noise = torch.Generator(device=self.device)
        self.noise.manual_seed(config.seed + 1)
        self.subset_rng = np.random.default_rng([config.seed, 2])
        self.epoch = 0  # completed epochs
        self.history: List[Tuple[int, str, str, float]] = []

    # -- state ---------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "num_modalities": self.M,
            "modality_names": self.names,
            "epoch": self.epoch,
            "model": self.model.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "noise_state": self.noise.get_state(),
            "subset_rng": self.subset_rng.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        snap = TrainConfig.from_dict(state["config"])
        if snap.hierarchy != self.config.hierarchy:
            raise CheckpointError(
                f"checkpoint hierarchy {snap.hierarchy.to_dict()} does not match configured {self.config.hierarchy.to_dict()}"
            )
        if snap.arch != self.config.arch:
            raise CheckpointError("checkpoint architecture does not match the configured architecture")
        if state["num_modalities"] != self.M:
            raise CheckpointError(f"checkpoint has {state['num_modalities']} modalities, dataset has {self.M}")
        self.model.load_state_dict(state["model"])
        self.discriminators.load_state_dict(state["discriminators"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.noise.set_state(state["noise_state"])
        self.subset_rng.bit_generator.state = state["subset_rng"]
        self.epoch = int(state["epoch"])

    def save(self, path) -> Path:
        for name, p in list(self.model.named_parameters()) + list(self.discriminators.named_parameters()):
            if not torch.isfinite(p).all():
                raise TrainingDiverged(f"parameter {name} is not finite at epoch {self.epoch}")
        return write_checkpoint(path, self.state_dict())

    # -- optimization ----------------------------------------------------------

    def subsets_for_step(self) -> List[Tuple[int, ...]]:
        subsets = enumerate_subsets(self.M)
        if self.config.subset_sampling == "random":
            return [subsets[int(self.subset_rng.integers(len(subsets)))]]
        return subsets

    def step(self, batch: List[torch.Tensor], epoch_fraction: float, epoch: int = 0, step: int = 0) -> LossReport:
        """One generator update, then (after warm-up) one discriminator update."""
        weights = self.config.loss
        report = total_loss(
            batch, self.model, weights, epoch_fraction, self.discriminators, self.noise, self.subsets_for_step()
        )
        _check_finite(report, self.names, epoch, step)
        self.opt_g.zero_grad(set_to_none=True)
        report.total.backward()
        self.opt_g.step()

        if weights.gan_active(epoch_fraction):
            reps = report.decoded[0].shape[0] // batch[0].shape[0]
            reals = [x.repeat(reps, 1, 1, 1) for x in batch]
            self.opt_d.zero_grad(set_to_none=True)
            d_loss = discriminator_loss(reals, report.decoded, self.discriminators)
            if not torch.isfinite(d_loss):
                raise TrainingDiverged(f"non-finite discriminator loss at epoch {epoch}, step {step}")
            d_loss.backward()
            self.opt_d.step()
            report.discriminator = d_loss.detach()
        report.decoded = None
        return report

    def run_epoch(self) -> List[Tuple[int, str, str, float]]:
        epoch = self.epoch
        frac = epoch / self.config.epochs
        sums: Dict[Tuple[str, str], float] = {}
        steps = 0
        self.model.train()
        for n, arr in enumerate(iterate_batches(self.data, self.config.batch_size, self.config.seed, epoch)):
            report = self.step(_to_device(arr, self.device), frac, epoch, n)
            for subset, term, value in report.named_terms(self.names):
                sums[(subset, term)] = sums.get((subset, term), 0.0) + value
            if self.config.loss.gan_active(frac) and report.discriminator is None:
                raise AssertionError("discriminator step skipped after warm-up")
            steps += 1
        if not self.config.loss.gan_active(frac):
            sums[("all", "discriminator")] = 0.0
        rows = [(epoch, subset, term, total / steps) for (subset, term), total in sums.items()]
        self.epoch += 1
        self.history.extend(rows)
        return rows

    # -- run -----------------------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    def fit(self, until: Optional[int] = None) -> Path:
        """Train until ``until`` completed epochs (default: config.epochs).
        Writes periodic checkpoints, ``last.pt`` and ``losses.csv``."""
        until = self.config.epochs if until is None else until
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        curves = out / "losses.csv"
        _truncate_curves(curves, self.epoch)
        every = self.config.checkpoint_every
        while self.epoch < until:
            t0 = time.time()
            rows = self.run_epoch()
            _append_curves(curves, rows)
            total = next(v for e, s, t, v in rows if s == "all" and t == "total")
            log.info("epoch %d/%d total %.4f (%.1fs)", self.epoch, self.config.epochs, total, time.time() - t0)
            if every and self.epoch % every == 0 and self.epoch < until:
                self.save(out / f"epoch_{self.epoch:04d}.pt")
        return self.save(out / "last.pt")


def _truncate_curves(path: Path, completed: int) -> None:
    """Drop rows for epochs >= completed (a resumed run rewrites them)."""
    if not path.exists():
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(CURVES_HEADER)
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < completed]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _append_curves(path: Path, rows) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        for epoch, subset, term, value in rows:
            w.writerow([epoch, subset, term, repr(float(value))])


def read_curves(path) -> List[Tuple[int, str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CURVES_HEADER:
            raise ValueError(f"unexpected loss CSV header {header}")
        return [(int(e), s, t, float(v)) for e, s, t, v in reader]


def train(config: TrainConfig, stop_after: Optional[int] = None) -> Path:
    """Train from scratch; returns the final checkpoint path.  ``stop_after``
    ends the run early (as if interrupted) after that many epochs."""
    trainer = Trainer(config)
    return trainer.fit(stop_after)


def resume(checkpoint, remaining_epochs: Optional[int] = None, config: Optional[TrainConfig] = None) -> Path:
    """Continue a run from a checkpoint with its optimizer and noise state.

    ``config`` (optional) is the configuration the caller expects; a
    different hierarchy or architecture is refused.  Without
    ``remaining_epochs`` the run continues to its configured epoch count.
    """
    state = read_checkpoint(checkpoint)
    snap = TrainConfig.from_dict(state["config"])
    if config is not None:
        if config.hierarchy != snap.hierarchy:
            raise CheckpointError(
                f"checkpoint hierarchy {snap.hierarchy.to_dict()} does not match requested {config.hierarchy.to_dict()}"
            )
        if config.arch != snap.arch:
            raise CheckpointError("checkpoint architecture does not match the requested architecture")
        snap = TrainConfig.from_dict({**config.to_dict(), "hierarchy": snap.hierarchy.to_dict(), "arch": snap.arch.to_dict()})
    done = int(state["epoch"])
    until = snap.epochs if remaining_epochs is None else done + remaining_epochs
    if until > snap.epochs:
        snap.epochs = until
    trainer = Trainer(snap)
    trainer.load_state_dict(state)
    return trainer.fit(until)


# --------------------------------------------------------------------------
# inference


def synthesize_array(model: MHVAE, inputs: Sequence[Optional[np.ndarray]], target: int) -> np.ndarray:
    """Zero-noise decode of modality ``target`` from the given uint16 inputs
    (None marks a missing modality).  Returns a uint16 image."""
    if len(inputs) != model.num_modalities:
        raise ContractError(f"expected {model.num_modalities} input slots, got {len(inputs)}")
    mask = [x is not None for x in inputs]
    if not any(mask):
        raise ContractError("at least one input modality is required; use sample_prior for unconditional generation")
    if not 0 <= target < model.num_modalities:
        raise ContractError(f"target modality {target} out of range")
    param = next(model.parameters())
    images = []
    for x in inputs:
        if x is None:
            images.append(None)
            continue
        t = torch.from_numpy(normalize(x)).to(param.device, param.dtype)
        images.append(t[None, None].contiguous(memory_format=torch.channels_last))
    with torch.no_grad():
        decoded, _ = model(images, mask, noise_scale=0.0)
    return denormalize(decoded[target][0, 0].float().cpu().numpy().clip(-1, 1))


def synthesize(checkpoint, inputs: Sequence[Optional[np.ndarray]], target: int, out_path) -> Path:
    model, _, _ = load_model(checkpoint)
    image = synthesize_array(model, inputs, target)
    out = Path(out_path)
    write_png16(out, image)
    return out


def sample_prior(checkpoint, count: int, seed: int, out_dir, temperature: float = 1.0) -> List[Path]:
    """Unconditional generation from the prior chain; writes every modality."""
    model, _, state = load_model(checkpoint)
    names = state.get("modality_names") or [str(i) for i in range(model.num_modalities)]
    gen = torch.Generator().manual_seed(seed)
    images = model.generate(count, gen, temperature)
    out = Path(out_dir)
    paths = []
    for n in range(count):
        for i, name in enumerate(names):
            p = out / f"sample_{n:04d}_{name}.png"
            write_png16(p, denormalize(images[i][n, 0].float().numpy().clip(-1, 1)))
            paths.append(p)
    return paths
