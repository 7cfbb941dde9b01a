"""Frechet distance over a pluggable feature extractor, and PSNR.

Feature statistics are accumulated in float64 with pairwise mean/M2
merging, so splitting the images across batches or workers does not change
the result beyond rounding.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.linalg
import torch
from torch import nn

from .error_handler import FingerprintMismatchError, ValidationError
from .interfaces import FeatureExtractor
from .noise_zoo import ImageBatch, ValueRange
from .seeding import seeded_init

__all__ = [
    "FeatureStats",
    "StatsAccumulator",
    "RandomProjectionExtractor",
    "ExternalExtractor",
    "feature_stats",
    "frechet_distance",
    "psnr",
    "mean_psnr",
    "save_stats",
    "load_stats",
]

logger = logging.getLogger(__name__)

_SYMMETRY_TOL = 1e-8
_PSD_TOL = -1e-6


@dataclass(frozen=True)
class FeatureStats:
    m: np.ndarray
    C: np.ndarray
    n: int
    fingerprint: str = ""

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError(f"feature stats need n >= 2 (got {self.n})")
        if self.C.shape != (self.dim, self.dim):
            raise ValidationError(f"covariance shape {self.C.shape} does not match d={self.dim}")
        if not (np.isfinite(self.m).all() and np.isfinite(self.C).all()):
            raise ValidationError("feature stats contain non-finite values")
        if np.abs(self.C - self.C.T).max(initial=0.0) > _SYMMETRY_TOL:
            raise ValidationError("covariance is not symmetric")
        if self.dim and scipy.linalg.eigvalsh(self.C).min() < _PSD_TOL * max(1.0, np.abs(self.C).max()):
            raise ValidationError("covariance is not positive semidefinite")

    @property
    def dim(self) -> int:
        return int(self.m.shape[0])


class StatsAccumulator:
    """Streaming mean and covariance (unbiased) of feature vectors."""

    def __init__(self, dim: int, fingerprint: str = ""):
        self.dim = dim
        self.fingerprint = fingerprint
        self.n = 0
        self.mean = np.zeros(dim, dtype=np.float64)
        self.m2 = np.zeros((dim, dim), dtype=np.float64)

    def _merge(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray) -> None:
        if n_b == 0:
            return
        n_a = self.n
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + np.outer(delta, delta) * (n_a * n_b / n)
        self.n = n

    def update(self, features: np.ndarray) -> "StatsAccumulator":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.dim:
            raise ValidationError(f"expected features of shape [N, {self.dim}] (got {f.shape})")
        if f.shape[0] == 0:
            return self
        mean_b = f.mean(axis=0)
        centered = f - mean_b
        self._merge(f.shape[0], mean_b, centered.T @ centered)
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.dim != self.dim:
            raise ValidationError("cannot merge accumulators of different dimension")
        if other.fingerprint != self.fingerprint:
            raise FingerprintMismatchError("cannot merge stats from different extractors")
        self._merge(other.n, other.mean, other.m2)
        return self

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise ValidationError(f"feature stats need at least 2 samples (got {self.n})")
        cov = self.m2 / (self.n - 1)
        cov = 0.5 * (cov + cov.T)
        return FeatureStats(self.mean.copy(), cov, self.n, self.fingerprint)


def _hash_parameters(module: nn.Module, tag: str) -> str:
    h = hashlib.sha256(tag.encode())
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


class RandomProjectionExtractor:
    """Frozen, seed-derived two-layer conv net with global average pooling."""

    def __init__(self, seed: int = 0, channels: int = 3, dim: int = 64, batch_size: int = 256):
        self.seed = seed
        self.channels = channels
        self.dim = dim
        self.batch_size = batch_size
        with seeded_init(seed):
            self.net = nn.Sequential(
                nn.Conv2d(channels, 32, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(32, dim, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
            ).double()
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.fingerprint = _hash_parameters(self.net, f"random_projection:{channels}:{dim}")

    @torch.no_grad()
    def __call__(self, images: ImageBatch) -> np.ndarray:
        x = images.to_range(ValueRange.SYMMETRIC_UNIT).data
        if x.shape[-1] != self.channels:
            raise ValidationError(f"extractor expects {self.channels} channels (got {x.shape[-1]})")
        out = []
        for start in range(0, x.shape[0], self.batch_size):
            chunk = x[start : start + self.batch_size].permute(0, 3, 1, 2).double()
            out.append(self.net(chunk).mean(dim=(2, 3)))
        return torch.cat(out).numpy() if out else np.zeros((0, self.dim))


class ExternalExtractor:
    """User-supplied TorchScript feature network mapping NCHW images to ``[N, d]``."""

    def __init__(self, path: str | Path, channels: int = 3, image_size: int = 32, batch_size: int = 256):
        self.path = Path(path)
        if not self.path.is_file():
            raise ValidationError(f"extractor weights not found: {self.path}")
        self.net = torch.jit.load(str(self.path), map_location="cpu")
        self.net.eval()
        self.batch_size = batch_size
        self.fingerprint = "external:" + hashlib.sha256(self.path.read_bytes()).hexdigest()
        with torch.no_grad():
            probe = self.net(torch.zeros(1, channels, image_size, image_size))
        if probe.ndim != 2:
            raise ValidationError("external extractor must return [N, d] features")
        self.dim = int(probe.shape[1])

    @torch.no_grad()
    def __call__(self, images: ImageBatch) -> np.ndarray:
        x = images.to_range(ValueRange.SYMMETRIC_UNIT).data
        out = [
            self.net(x[s : s + self.batch_size].permute(0, 3, 1, 2).float()).double()
            for s in range(0, x.shape[0], self.batch_size)
        ]
        return torch.cat(out).numpy()


def feature_stats(
    images: ImageBatch | Iterable[ImageBatch],
    extractor: FeatureExtractor,
    accumulator: Optional[StatsAccumulator] = None,
) -> FeatureStats:
    """Mean and unbiased covariance of ``extractor`` features over ``images``."""
    acc = accumulator or StatsAccumulator(extractor.dim, extractor.fingerprint)
    batches = [images] if isinstance(images, ImageBatch) else images
    for batch in batches:
        acc.update(extractor(batch))
    return acc.finalize()


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(stats_r: FeatureStats, stats_g: FeatureStats) -> float:
    """``|m_r - m_g|^2 + Tr(C_r + C_g - 2 (C_r C_g)^(1/2))``, clamped at 0."""
    if stats_r.fingerprint != stats_g.fingerprint:
        raise FingerprintMismatchError(
            f"stats come from different extractors ({stats_r.fingerprint[:12]} vs "
            f"{stats_g.fingerprint[:12]})"
        )
    if stats_r.dim != stats_g.dim:
        raise ValidationError(f"feature dimension mismatch: {stats_r.dim} vs {stats_g.dim}")
    for s in (stats_r, stats_g):
        if not (np.isfinite(s.m).all() and np.isfinite(s.C).all()):
            raise ValidationError("feature stats contain non-finite values")

    root_r = _sqrt_psd(stats_r.C)
    inner = root_r @ stats_g.C @ root_r
    inner = 0.5 * (inner + inner.T)
    eig = np.clip(scipy.linalg.eigvalsh(inner), 0.0, None)
    diff = stats_r.m - stats_g.m
    fid = float(diff @ diff + np.trace(stats_r.C) + np.trace(stats_g.C) - 2.0 * np.sqrt(eig).sum())
    if fid < -1e-6:
        logger.warning("Frechet distance came out negative (%.3g); clamping to 0", fid)
    return max(fid, 0.0)


def _as_array(x) -> np.ndarray:
    if isinstance(x, ImageBatch):
        x = x.data
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(reference, estimate, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``math.inf``."""
    ref, est = _as_array(reference), _as_array(estimate)
    if ref.shape != est.shape:
        raise ValidationError(f"shape mismatch: {ref.shape} vs {est.shape}")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_psnr(references, estimates, peak: float = 1.0) -> float:
    """Average of per-image PSNR over the leading axis."""
    ref, est = _as_array(references), _as_array(estimates)
    if ref.shape != est.shape:
        raise ValidationError(f"shape mismatch: {ref.shape} vs {est.shape}")
    if ref.shape[0] == 0:
        raise ValidationError("mean_psnr needs at least one image")
    return float(np.mean([psnr(r, e, peak) for r, e in zip(ref, est)]))


def save_stats(stats: FeatureStats, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, d=stats.dim, n=stats.n, m=stats.m, C=stats.C, fingerprint=np.array(stats.fingerprint))
    return path


def load_stats(path: str | Path, fingerprint: Optional[str] = None) -> FeatureStats:
    with np.load(path, allow_pickle=False) as data:
        stats = FeatureStats(
            m=data["m"], C=data["C"], n=int(data["n"]), fingerprint=str(data["fingerprint"])
        )
    if fingerprint is not None and stats.fingerprint != fingerprint:
        raise FingerprintMismatchError(f"cached stats at {path} come from another extractor")
    return stats
