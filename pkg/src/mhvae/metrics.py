"""PSNR / SSIM and test-set evaluation reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from mhvae.errors import ContractError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11


def _pair(reference, test) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, test, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ContractError("data_range must be positive")
    a, b = _pair(reference, test)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Normalized 2-D Gaussian window; sigma defaults to size / 6.4."""
    sigma = size / 6.4 if sigma is None else sigma
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(reference, test, window_size: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 2.0) -> np.ndarray:
    """Local SSIM over every position where the window fits entirely."""
    a, b = _pair(reference, test)
    if a.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {a.shape}")
    if window_size < 1 or window_size > min(a.shape):
        raise ContractError(f"window {window_size} does not fit in image {a.shape}")
    w = gaussian_window(window_size)

    def filt(x):
        return signal.correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(reference, test, window_size: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 2.0) -> float:
    """Mean structural similarity with a Gaussian window."""
    return float(ssim_map(reference, test, window_size, k1, k2, data_range).mean())


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


@dataclass
class MetricRow:
    sample_id: str
    subset: str
    target_modality: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: List[MetricRow] = field(default_factory=list)

    def values(self, subset: str, target: str, metric: str) -> np.ndarray:
        attr = "psnr_db" if metric == "psnr" else metric
        return np.array([getattr(r, attr) for r in self.rows if r.subset == subset and r.target_modality == target])

    def keys(self) -> List[Tuple[str, str]]:
        seen = []
        for r in self.rows:
            if (r.subset, r.target_modality) not in seen:
                seen.append((r.subset, r.target_modality))
        return seen

    def summary(self) -> List[dict]:
        out = []
        for subset, target in self.keys():
            for metric in ("psnr", "ssim"):
                v = self.values(subset, target, metric)
                if np.isinf(v).any():  # identical reconstructions: PSNR sentinel
                    mean, std = math.inf, (0.0 if np.isinf(v).all() else math.inf)
                else:
                    mean, std = float(np.mean(v)), float(np.std(v))
                out.append({
                    "subset": subset, "target_modality": target, "metric": metric,
                    "mean": mean, "std": std, "count": len(v),
                })
        return out

    def mean(self, subset: str, target: str, metric: str) -> float:
        return float(np.mean(self.values(subset, target, metric)))

    def write_csv(self, out_dir) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        per_sample = out / "metrics.csv"
        with open(per_sample, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "subset", "target_modality", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.sample_id, r.subset, r.target_modality, format_psnr(r.psnr_db), f"{r.ssim:.6f}"])
        summary = out / "summary.csv"
        with open(summary, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subset", "target_modality", "metric", "mean", "std"])
            for s in self.summary():
                w.writerow([s["subset"], s["target_modality"], s["metric"], format_psnr(s["mean"]), format_psnr(s["std"])])
        return per_sample, summary


def evaluate(model, manifest, subsets: Optional[Sequence[Sequence[int]]] = None, batch_size: int = 32) -> MetricReport:
    """Score every (subset, target modality, test sample) with PSNR and SSIM.

    Decoding uses zero noise (posterior means at every level).  Outputs are
    quantized through the 16-bit storage format before scoring so numbers
    match what ``synthesize`` writes to disk.
    """
    import torch

    from mhvae.data import denormalize, normalize
    from mhvae.hierarchy import enumerate_subsets, subset_label

    M = manifest.num_modalities
    if M != model.num_modalities:
        raise ContractError(f"model has {model.num_modalities} modalities, dataset has {M}")
    if (manifest.height, manifest.width) != (model.arch.image_size, model.arch.image_size):
        raise ContractError(
            f"dataset geometry {manifest.height}x{manifest.width} does not match model image size {model.arch.image_size}"
        )
    subsets = enumerate_subsets(M) if subsets is None else [tuple(s) for s in subsets]
    data = manifest.load_array()
    ids = [s.sample_id for s in manifest.samples]
    param = next(model.parameters())
    report = MetricReport()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for subset in subsets:
                label = subset_label(subset, manifest.modalities)
                mask = [i in subset for i in range(M)]
                outs = []
                for start in range(0, len(data), batch_size):
                    chunk = torch.from_numpy(data[start : start + batch_size]).to(param.device, param.dtype)
                    images = [chunk[:, i : i + 1].contiguous(memory_format=torch.channels_last) for i in range(M)]
                    decoded, _ = model(images, mask, noise_scale=0.0)
                    outs.append(torch.stack([d[:, 0] for d in decoded], 1).float().cpu().numpy())
                pred = normalize(denormalize(np.clip(np.concatenate(outs), -1.0, 1.0)))
                for n, sid in enumerate(ids):
                    for t in range(M):
                        report.rows.append(MetricRow(
                            sid, label, manifest.modalities[t],
                            psnr(data[n, t], pred[n, t]), ssim(data[n, t], pred[n, t]),
                        ))
    finally:
        model.train(was_training)
    return report


def mean_image_baseline(train_manifest, test_manifest, target: int) -> float:
    """Mean test PSNR of predicting the per-pixel training-set mean image."""
    from mhvae.data import denormalize, normalize

    train = train_manifest.load_array()[:, target]
    test = test_manifest.load_array()[:, target]
    mean_img = normalize(denormalize(train.mean(axis=0)))
    return float(np.mean([psnr(t, mean_img) for t in test]))
