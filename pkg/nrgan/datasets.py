"""Image sources and the frozen noisy dataset build.

The synthetic toy images are two-tone rectangles or linear gradients, all
drawn from a fixed vector of uniform parameters, so an oracle generator can
reproduce the exact clean distribution by pushing a Gaussian latent through
the normal CDF.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from PIL import Image
from torch import nn

from .error_handler import ValidationError
from .noise_zoo import ImageBatch, NoiseSpec, ValueRange, sample_noise
from .seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
COLOR_RANGE = 0.8
_SPLIT_KEYS = {"train": 0, "test": 1}


def toy_param_count(channels: int) -> int:
    # kind, two colors, rectangle corners, gradient angle
    return 1 + 2 * channels + 4 + 1


def toy_from_params(u: torch.Tensor, size: int, channels: int) -> torch.Tensor:
    """Render ``[N, size, size, C]`` toy images from uniform parameters ``u``."""
    n = u.shape[0]
    if u.shape[1] < toy_param_count(channels):
        raise ValidationError(f"toy images need {toy_param_count(channels)} parameters per image")
    dtype = u.dtype
    kind = u[:, 0]
    c1 = -COLOR_RANGE + 2 * COLOR_RANGE * u[:, 1 : 1 + channels]
    c2 = -COLOR_RANGE + 2 * COLOR_RANGE * u[:, 1 + channels : 1 + 2 * channels]
    corners = (u[:, 1 + 2 * channels : 5 + 2 * channels] * size).floor().clamp(max=size - 1)
    angle = 2 * math.pi * u[:, 5 + 2 * channels]

    coords = torch.arange(size, dtype=dtype)
    rows, cols = coords[:, None], coords[None, :]
    top = torch.minimum(corners[:, 0], corners[:, 1])[:, None, None]
    bottom = torch.maximum(corners[:, 0], corners[:, 1])[:, None, None]
    left = torch.minimum(corners[:, 2], corners[:, 3])[:, None, None]
    right = torch.maximum(corners[:, 2], corners[:, 3])[:, None, None]
    inside = (rows >= top) & (rows <= bottom) & (cols >= left) & (cols <= right)
    rect_w = inside.to(dtype)

    center = (size - 1) / 2.0
    proj = (rows - center) * torch.cos(angle)[:, None, None] + (cols - center) * torch.sin(angle)[:, None, None]
    grad_w = ((proj / (size / math.sqrt(2.0)) + 1.0) * 0.5).clamp(0.0, 1.0)

    w = torch.where((kind < 0.5)[:, None, None], rect_w, grad_w)[..., None]
    return (1.0 - w) * c1[:, None, None, :] + w * c2[:, None, None, :]


def synthetic_toy(n: int, size: int, channels: int, rng) -> ImageBatch:
    """``n`` clean toy images in the symmetric_unit range."""
    if n < 1:
        raise ValidationError("the dataset is empty")
    u = torch.rand(n, toy_param_count(channels), generator=rng)
    return ImageBatch(toy_from_params(u, size, channels), ValueRange.SYMMETRIC_UNIT)


class ToyOracleGenerator(nn.Module):
    """Clean generator that emits exactly the toy distribution."""

    def __init__(self, size: int, channels: int, z_dim: int = 128):
        super().__init__()
        if z_dim < toy_param_count(channels):
            raise ValidationError(f"oracle needs z_dim >= {toy_param_count(channels)}")
        self.size = size
        self.channels = channels
        self.z_dim = z_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        u = torch.special.ndtr(z[:, : toy_param_count(self.channels)])
        return toy_from_params(u, self.size, self.channels)


def load_image_folder(path: str | Path, size: int, channels: int, limit: Optional[int] = None) -> ImageBatch:
    """Read every image under ``path`` (sorted), center-crop and resize to ``size``."""
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"image folder not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ValidationError(f"no images found in {root}")
    mode = "L" if channels == 1 else "RGB"
    arrays = []
    for p in files:
        with Image.open(p) as im:
            im = im.convert(mode)
            side = min(im.size)
            left, top = (im.width - side) // 2, (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BICUBIC)
            a = np.asarray(im, dtype=np.float32)
        arrays.append(a[..., None] if a.ndim == 2 else a)
    data = torch.from_numpy(np.stack(arrays)) / 127.5 - 1.0
    logger.info("loaded %d images from %s", len(files), root)
    return ImageBatch(data, ValueRange.SYMMETRIC_UNIT)


@dataclass
class ImageRecord:
    source_id: str
    split: str
    noise: Optional[str]  # "A", "B", ... or None for clean
    seed: Optional[int] = None


@dataclass
class DatasetManifest:
    records: List[ImageRecord] = field(default_factory=list)
    noise_specs: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    seed: int = 0

    def count(self, split: str = "train", noise: Optional[str] = "*") -> int:
        return sum(
            1
            for r in self.records
            if r.split == split and (noise == "*" and r.noise is not None or r.noise == noise)
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "noise_specs": self.noise_specs,
            "records": [asdict(r) for r in self.records],
        }


@dataclass
class MaterializedDataset:
    manifest: DatasetManifest
    train_clean: ImageBatch
    train: ImageBatch  # frozen noisy realizations (clean where uncorrupted)
    test: ImageBatch  # always clean


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _corrupt(images: ImageBatch, spec: NoiseSpec, seed: int, index: int) -> tuple[ImageBatch, int]:
    s = derive_seed(seed, _SPLIT_KEYS["train"], index)
    _, y = sample_noise(spec, images.select(slice(index, index + 1)), make_rng(s))
    return y, s


def build_dataset(config, rng=None) -> MaterializedDataset:
    """Materialize train/test splits and corrupt the train split once.

    Exactly ``round(r * N)`` training images are corrupted, chosen uniformly
    without replacement. In mixed mode every training image is corrupted:
    ``round(mu * N)`` of them with ``noise_b`` and the rest with ``noise``.
    Each corrupted image uses its own derived seed, so the result does not
    depend on processing order.
    """
    config.validate()
    d = config.data
    seed = config.seed
    rng = rng or make_rng(seed, 100)

    if d.dataset == "synthetic_toy":
        pool = synthetic_toy(d.num_train + d.num_test, d.image_size, d.channels, rng)
        ids = [f"toy:{i}" for i in range(len(pool))]
    else:
        pool = load_image_folder(d.image_folder, d.image_size, d.channels)
        if len(pool) < 3:
            raise ValidationError("image folder needs at least 3 images")
        ids = [f"folder:{i}" for i in range(len(pool))]
        order = torch.randperm(len(pool), generator=rng)
        pool = pool.select(order)
        ids = [ids[int(i)] for i in order]

    num_test = min(d.num_test, len(pool) - 1)
    num_train = min(d.num_train, len(pool) - num_test)
    train_clean = pool.select(slice(0, num_train))
    test = pool.select(slice(num_train, num_train + num_test))

    perm = torch.randperm(num_train, generator=rng).tolist()
    if d.mixed:
        # every image is noisy; the first round(mu * N) of the permutation use noise_b
        n_b = _round_half_up(d.mixture_rate * num_train)
        assign = {i: ("B" if k < n_b else "A") for k, i in enumerate(perm)}
    else:
        assign = {i: "A" for i in perm[: _round_half_up(d.noise_rate * num_train)]}
    specs = {"A": config.noise, "B": config.noise_b}

    manifest = DatasetManifest(seed=seed, noise_specs={"A": config.noise.to_flat()})
    if d.mixed:
        manifest.noise_specs["B"] = config.noise_b.to_flat()

    rows = []
    for i in range(num_train):
        tag = assign.get(i)
        if tag is None:
            rows.append(train_clean.data[i : i + 1])
            manifest.records.append(ImageRecord(ids[i], "train", None))
        else:
            y, s = _corrupt(train_clean, specs[tag], seed, i)
            rows.append(y.data)
            manifest.records.append(ImageRecord(ids[i], "train", tag, s))
    for j in range(num_test):
        manifest.records.append(ImageRecord(ids[num_train + j], "test", None))

    train = ImageBatch(torch.cat(rows), ValueRange.SYMMETRIC_UNIT)
    logger.info(
        "dataset built: %d train (%d corrupted), %d test", num_train, len(assign), num_test
    )
    return MaterializedDataset(manifest, train_clean, train, test)
