"""Synthetic paired-modality data, the on-disk dataset format, intensity
normalization and batch iteration.

A dataset directory holds ``manifest.json`` and ``images/<sample_id>_<modality>.png``
(16-bit grayscale).  Synthetic pairs render one random scene twice: an
MR-like view (smooth regions, mild blur) and an US-like view (edge-enhanced
boundaries, radial depth falloff, multiplicative Gamma speckle).
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from mhvae.errors import ContractError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
U16_MAX = 65535
SYNTHETIC_MODALITIES = ("mr", "us")
SPECKLE_SHAPE = 16.0


class DatasetError(IOError):
    """A dataset file is missing, unreadable or malformed."""


# --------------------------------------------------------------------------
# normalization


def normalize(image_u16) -> np.ndarray:
    """Affine map of stored intensities [0, 65535] onto model values [-1, 1]."""
    a = np.asarray(image_u16)
    if a.size and (not np.isfinite(a).all() or a.min() < 0 or a.max() > U16_MAX):
        raise ContractError("intensities must lie within [0, 65535]")
    return (a.astype(np.float64) / U16_MAX * 2.0 - 1.0).astype(np.float32)


def denormalize(image) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded to the nearest 16-bit level."""
    a = np.asarray(image, dtype=np.float64)
    if a.size and (not np.isfinite(a).all() or a.min() < -1.0 - 1e-6 or a.max() > 1.0 + 1e-6):
        raise ContractError("model values must lie within [-1, 1]")
    u = np.rint((np.clip(a, -1.0, 1.0) + 1.0) * 0.5 * U16_MAX)
    return u.astype(np.uint16)


# --------------------------------------------------------------------------
# manifest


@dataclass
class SampleEntry:
    sample_id: str
    split: str
    files: Dict[str, str]


@dataclass
class DatasetManifest:
    root: Path
    height: int
    width: int
    modalities: List[str]
    samples: List[SampleEntry]
    version: int = MANIFEST_VERSION
    generator: Optional[dict] = None
    _cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    def split(self, name: str) -> "DatasetManifest":
        """A view restricted to one split tag (shares the decode cache)."""
        return DatasetManifest(
            self.root, self.height, self.width, self.modalities,
            [s for s in self.samples if s.split == name], self.version, self.generator, self._cache,
        )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "geometry": {"height": self.height, "width": self.width, "modalities": self.num_modalities},
            "modality_names": list(self.modalities),
            "generator": self.generator,
            "samples": [{"sample_id": s.sample_id, "split": s.split, "files": s.files} for s in self.samples],
        }

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, self.path)
        return self.path

    def read_image(self, sample: SampleEntry, modality: str) -> np.ndarray:
        path = self.root / sample.files[modality]
        try:
            with Image.open(path) as im:
                arr = np.array(im)
        except (OSError, ValueError) as exc:
            raise DatasetError(f"sample {sample.sample_id}: cannot decode {path}: {exc}") from exc
        if arr.shape != (self.height, self.width):
            raise DatasetError(
                f"sample {sample.sample_id}: {path.name} is {arr.shape}, expected {(self.height, self.width)}"
            )
        return arr

    def load_sample(self, sample: SampleEntry) -> np.ndarray:
        """(M, H, W) float32 array in [-1, 1]."""
        hit = self._cache.get(sample.sample_id)
        if hit is not None:
            return hit
        arr = np.stack([normalize(self.read_image(sample, m)) for m in self.modalities])
        self._cache[sample.sample_id] = arr
        return arr

    def load_array(self) -> np.ndarray:
        """All samples stacked as (N, M, H, W) float32."""
        if not self.samples:
            return np.zeros((0, self.num_modalities, self.height, self.width), np.float32)
        return np.stack([self.load_sample(s) for s in self.samples])


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest (file or its directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {doc.get('version')!r}")
    geo = doc["geometry"]
    names = list(doc["modality_names"])
    if len(names) != geo["modalities"]:
        raise DatasetError(f"{len(names)} modality names for {geo['modalities']} modalities")
    samples = [SampleEntry(s["sample_id"], s.get("split", "train"), dict(s["files"])) for s in doc["samples"]]
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate sample ids: {dup[:5]}")
    man = DatasetManifest(path.parent, int(geo["height"]), int(geo["width"]), names, samples, generator=doc.get("generator"))
    for s in samples:
        if set(s.files) != set(names):
            raise DatasetError(f"sample {s.sample_id}: files for {sorted(s.files)}, expected {sorted(names)}")
        if check_files:
            for m in names:
                f = man.root / s.files[m]
                if not f.is_file():
                    raise DatasetError(f"sample {s.sample_id}: missing file {f}")
                with Image.open(f) as im:
                    if im.size != (man.width, man.height):
                        raise DatasetError(
                            f"sample {s.sample_id}: {f.name} is {im.size[1]}x{im.size[0]}, "
                            f"expected {man.height}x{man.width}"
                        )
    return man


def read_png16(path) -> np.ndarray:
    """Read a single-channel 16-bit PNG as uint16."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if arr.dtype.kind not in "iu" or arr.min() < 0 or arr.max() > U16_MAX:
            raise DatasetError(f"{path}: pixel type {arr.dtype} is not 16-bit grayscale")
        arr = arr.astype(np.uint16)
    return arr


def write_png16(path: Path, image_u16: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.ascontiguousarray(image_u16, dtype=np.uint16)).save(tmp, format="PNG")
    os.replace(tmp, path)


def import_slices(
    out_dir,
    pairs: Sequence[Sequence[np.ndarray]],
    modality_names: Sequence[str],
    sample_ids: Optional[Sequence[str]] = None,
    splits: Optional[Sequence[str]] = None,
) -> DatasetManifest:
    """Write pre-extracted, co-registered 2D slices (uint16 arrays, one per
    modality) as a dataset in the standard layout."""
    out = Path(out_dir)
    if not pairs:
        raise ContractError("nothing to import")
    h, w = np.asarray(pairs[0][0]).shape
    entries = []
    for n, images in enumerate(pairs):
        if len(images) != len(modality_names):
            raise ContractError(f"pair {n} has {len(images)} images for {len(modality_names)} modalities")
        sid = sample_ids[n] if sample_ids is not None else f"s{n:05d}"
        split = splits[n] if splits is not None else "train"
        files = {}
        for name, img in zip(modality_names, images):
            img = np.asarray(img)
            if img.shape != (h, w):
                raise ContractError(f"pair {sid}: {name} is {img.shape}, expected {(h, w)}")
            if img.dtype != np.uint16:
                raise ContractError(f"pair {sid}: {name} must be uint16, got {img.dtype}")
            rel = f"images/{sid}_{name}.png"
            write_png16(out / rel, img)
            files[name] = rel
        entries.append(SampleEntry(sid, split, files))
    man = DatasetManifest(out, h, w, list(modality_names), entries, generator={"kind": "import"})
    man.save()
    return man


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Scene:
    labels: np.ndarray  # int region map, 0 = background
    tissue: np.ndarray  # per-region tissue value in [0, 1]; index 0 unused
    lesion_region: int


def _grid(h: int, w: int):
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return (y + 0.5) / h * 2 - 1, (x + 0.5) / w * 2 - 1


def random_scene(rng: np.random.Generator, h: int, w: int) -> Scene:
    """3-6 overlapping ellipses (the first one a large 'head') plus a lesion."""
    yy, xx = _grid(h, w)
    labels = np.zeros((h, w), np.int32)
    n = int(rng.integers(3, 7))
    tissue = [0.0]
    for k in range(n):
        if k == 0:
            cy, cx = rng.uniform(-0.1, 0.1, 2)
            ry, rx = rng.uniform(0.7, 0.9, 2)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, 2)
            ry, rx = rng.uniform(0.15, 0.45, 2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        labels[inside] = k + 1
        tissue.append(rng.uniform(0.15, 0.95))
    # lesion: small disc inside the head
    cy, cx = rng.uniform(-0.45, 0.45, 2)
    r = rng.uniform(0.08, 0.16)
    lesion = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    labels[lesion] = n + 1
    tissue.append(rng.uniform(0.8, 1.0))
    return Scene(labels, np.asarray(tissue), n + 1)


def render_mr(scene: Scene) -> np.ndarray:
    """Smooth MR-like view in [0, 1]: region tissue values, mild blur."""
    img = scene.tissue[scene.labels]
    return np.clip(ndimage.gaussian_filter(img, 0.8), 0.0, 1.0)


def us_echo(tissue: np.ndarray) -> np.ndarray:
    """Fixed tissue -> echogenicity map shared by every US-like render."""
    return 0.15 + 0.55 * (1.0 - tissue) ** 1.5


def render_us_clean(scene: Scene) -> np.ndarray:
    """Noise-free US-like view in [0, 1]: echogenicity, bright boundaries,
    depth falloff from a probe at the top edge.  Speckle multiplies this."""
    h, w = scene.labels.shape
    echo = us_echo(scene.tissue)
    echo[0] = 0.0
    base = echo[scene.labels]
    base[scene.labels == scene.lesion_region] = 0.85
    boundary = ndimage.morphological_gradient(scene.labels, size=3) > 0
    edges = ndimage.gaussian_filter(boundary.astype(np.float64), 0.7)
    edges /= max(edges.max(), 1e-9)
    img = base + 0.5 * edges * (scene.labels > 0)
    yy, xx = _grid(h, w)
    depth = np.sqrt((yy + 1.0) ** 2 + xx**2)
    falloff = np.exp(-0.35 * depth)
    return np.clip(img * falloff, 0.0, 1.0)


def render_us(scene: Scene, rng: np.random.Generator, speckle_shape: float = SPECKLE_SHAPE) -> np.ndarray:
    clean = render_us_clean(scene)
    speckle = rng.gamma(speckle_shape, 1.0 / speckle_shape, size=clean.shape)
    return np.clip(clean * speckle, 0.0, 1.0)


def synthetic_pair(seed: int, index: int, h: int, w: int) -> np.ndarray:
    """(2, H, W) uint16 pair for one sample, deterministic in (seed, index)."""
    rng = np.random.default_rng([seed, index])
    scene = random_scene(rng, h, w)
    mr = render_mr(scene)
    us = render_us(scene, rng)
    return np.stack([np.rint(mr * U16_MAX), np.rint(us * U16_MAX)]).astype(np.uint16)


def _check_size(n: int, what: str) -> None:
    if n < 16 or n & (n - 1):
        raise ContractError(f"{what} must be a power of two >= 16, got {n}")


def generate_synthetic(out_dir, count: int, seed: int, height: int = 64, width: Optional[int] = None, test_count: int = 0) -> DatasetManifest:
    """Write ``count`` synthetic MR/US pairs; the last ``test_count`` are tagged 'test'."""
    width = height if width is None else width
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if not 0 <= test_count <= count:
        raise ContractError(f"test_count must be within [0, count], got {test_count}")
    _check_size(height, "height")
    _check_size(width, "width")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for n in range(count):
        sid = f"s{n:05d}"
        pair = synthetic_pair(seed, n, height, width)
        files = {}
        for name, img in zip(SYNTHETIC_MODALITIES, pair):
            rel = f"images/{sid}_{name}.png"
            write_png16(out / rel, img)
            files[name] = rel
        entries.append(SampleEntry(sid, "test" if n >= count - test_count else "train", files))
    man = DatasetManifest(
        out, height, width, list(SYNTHETIC_MODALITIES), entries,
        generator={"kind": "synthetic", "seed": seed, "count": count, "test_count": test_count},
    )
    man.save()
    log.info("wrote %d synthetic pairs to %s", count, out)
    return man


# --------------------------------------------------------------------------
# batches


def epoch_order(num_samples: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(num_samples)


def iterate_batches(
    data, batch_size: int, shuffle_seed: int = 0, epoch: int = 0, shuffle: bool = True
) -> Iterator[np.ndarray]:
    """Yield (B, M, H, W) float32 batches covering every sample once.

    ``data`` is a DatasetManifest (decoded lazily, errors name the sample)
    or an already loaded (N, M, H, W) array.  The order is a deterministic
    permutation of (shuffle_seed, epoch); the last batch may be short.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data.samples) if isinstance(data, DatasetManifest) else len(data)
    order = epoch_order(n, shuffle_seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if isinstance(data, DatasetManifest):
            yield np.stack([data.load_sample(data.samples[i]) for i in idx])
        else:
            yield np.asarray(data[idx])
