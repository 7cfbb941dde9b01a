"""Experiment runs: dataset build, training, evaluation, grids and checkpoints.

Everything a run writes lives under ``out_dir``::

    config.canonical   complete config as JSON
    manifest.json      per-image corruption record
    metrics.jsonl      one JSON object per logged step
    ckpt/              generator (and denoiser) checkpoints
    grids/             PNG sample grids
    real_stats_<key>.npz  cached feature stats of the clean test split
    report.json        final evaluation
    DIVERGED           present only when training diverged
    run.log            log of the run
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from . import logging as nrgan_logging
from .checkpoint import load_bundle, load_checkpoint, save_checkpoint
from .datasets import (
    IMAGE_SUFFIXES,
    MaterializedDataset,
    ToyOracleGenerator,
    build_dataset,
)
from .denoising import DenoiserNet, ExternalBaseline, Scheme, denoise_image, train_denoiser
from .error_handler import ConfigurationError, DivergenceError, ValidationError
from .evaluation import (
    ExternalExtractor,
    FeatureStats,
    RandomProjectionExtractor,
    feature_stats,
    frechet_distance,
    load_stats,
    mean_psnr,
    save_stats,
)
from .noise_zoo import ImageBatch, NoiseSpec, ValueRange, sample_noise
from .nr_generators import GeneratorBundle, Variant, build_bundle, sample_observation
from .seeding import derive_seed, make_rng, seeded_init
from .settings import ExperimentConfig
from .training import Trainer

logger = logging.getLogger(__name__)

DESK_SCALE_NOTE = (
    "FID uses {real} real test and {fake} generated samples with a seed-derived "
    "random-projection extractor unless configured otherwise; reference-scale "
    "evaluation uses 10k/10k inception features"
)
_BATCH_STREAM = 300
_INIT_STREAM = 100
_EVAL_STREAM = 200
_TEST_NOISE_STREAM = 400
_SAMPLE_BATCH = 256


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.canonical"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    @property
    def ckpt(self) -> Path:
        return self.root / "ckpt"

    @property
    def grids(self) -> Path:
        return self.root / "grids"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    @property
    def diverged(self) -> Path:
        return self.root / "DIVERGED"

    @property
    def run_log(self) -> Path:
        return self.root / "run.log"

    def real_stats(self, key: str) -> Path:
        return self.root / f"real_stats_{key}.npz"

    def generator_ckpt(self, iteration: Optional[int] = None) -> Path:
        name = "generator_last.pt" if iteration is None else f"generator_{iteration:07d}.pt"
        return self.ckpt / name

    def prepare(self) -> "RunPaths":
        try:
            for d in (self.root, self.ckpt, self.grids):
                d.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write_test"
            probe.write_text("")
            probe.unlink()
        except OSError as e:
            raise ConfigurationError(f"output directory {self.root} is not writable: {e}") from e
        return self


def atomic_write_json(path: Path, data: Dict[str, Any]) -> None:
    """Write JSON via a temp file and rename, so readers never see half a file."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class MetricsLog:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path: Path, fresh: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if fresh:
            self.path.write_text("", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        with open(self.path, "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------- #
# grids
# ---------------------------------------------------------------------- #
def to_uint8(images: ImageBatch) -> np.ndarray:
    lo, hi = images.value_range.bounds
    data = images.data.detach().cpu().double().clamp(lo, hi)
    return ((data - lo) / (hi - lo) * 255.0).round().to(torch.uint8).numpy()


def emit_grid(images: ImageBatch, rows: int, cols: int, path: str | Path) -> Path:
    """Tile the first ``rows * cols`` images row-major into one PNG."""
    if rows < 1 or cols < 1:
        raise ValidationError("grid needs at least one row and one column")
    if rows * cols > len(images):
        raise ValidationError(f"grid {rows}x{cols} needs {rows * cols} images (got {len(images)})")
    pixels = to_uint8(images.select(slice(0, rows * cols)))
    _, h, w, c = pixels.shape
    grid = pixels.reshape(rows, cols, h, w, c).transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, c)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid[..., 0] if c == 1 else grid).save(path, format="PNG")
    return path


# ---------------------------------------------------------------------- #
# bundles and extractors
# ---------------------------------------------------------------------- #
def oracle_bundle(spec: NoiseSpec, size: int, channels: int, z_dim: int = 128) -> GeneratorBundle:
    """Bundle that samples the exact toy clean distribution and the true noise."""
    return GeneratorBundle(
        Variant.AMBIENT,
        ToyOracleGenerator(size, channels, z_dim),
        preset="oracle",
        channels=channels,
        z_dim=z_dim,
        noise_spec=spec,
    )


def bundle_from_config(config: ExperimentConfig) -> GeneratorBundle:
    m = config.model
    if m.preset == "oracle":
        if config.data.dataset != "synthetic_toy":
            raise ConfigurationError("the oracle bundle exists for the synthetic toy dataset only")
        return oracle_bundle(config.noise, config.data.image_size, config.data.channels, m.z_dim)
    return build_bundle(
        m.variant,
        preset=m.preset,
        channels=config.data.channels,
        z_dim=m.z_dim,
        sigma_max=m.sigma_max,
        transforms=m.transforms,
        relation=m.relation,
        noise_spec=config.noise if m.variant == Variant.AMBIENT.value else None,
    )


def make_extractor(config: ExperimentConfig):
    e = config.eval
    if e.extractor == "external":
        return ExternalExtractor(e.extractor_path, config.data.channels, config.data.image_size)
    return RandomProjectionExtractor(e.extractor_seed, config.data.channels, e.extractor_dim)


def real_stats_key(config: ExperimentConfig, num_real: int) -> str:
    """Digest of the data section, run seed and sample count behind the real stats."""
    doc = {"data": config.to_dict()["data"], "seed": config.seed, "num_real": num_real}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def real_stats(test: ImageBatch, extractor, cache: Optional[Path] = None, limit: Optional[int] = None) -> FeatureStats:
    """Feature stats of the clean test split; a cached file must match the extractor fingerprint."""
    if cache is not None and cache.exists():
        return load_stats(cache, fingerprint=extractor.fingerprint)
    images = test if limit is None else test.select(slice(0, limit))
    stats = feature_stats(images, extractor)
    if cache is not None:
        save_stats(stats, cache)
    return stats


def sample_batches(bundle: GeneratorBundle, n: int, rng) -> Tuple[ImageBatch, ImageBatch]:
    """``n`` EMA samples as ``(clean, noisy composed)``."""
    xs, ys = [], []
    for start in range(0, n, _SAMPLE_BATCH):
        x_g, _, y_g = sample_observation(bundle, min(_SAMPLE_BATCH, n - start), rng, use_ema=True)
        xs.append(x_g.data)
        ys.append(y_g.data)
    return ImageBatch(torch.cat(xs)), ImageBatch(torch.cat(ys))


def evaluate_bundle(
    bundle: GeneratorBundle, config: ExperimentConfig, test: ImageBatch, paths: Optional[RunPaths] = None
) -> Dict[str, Any]:
    """FID of EMA clean samples (and of noisy composed samples) against clean test images.

    With ``paths`` the real statistics are cached in the run directory, keyed
    by :func:`real_stats_key`.
    """
    extractor = make_extractor(config)
    num_real = min(config.eval.num_real, len(test))
    cache = paths.real_stats(real_stats_key(config, num_real)) if paths is not None else None
    stats_r = real_stats(test, extractor, cache, limit=num_real)
    x_g, y_g = sample_batches(bundle, config.eval.num_fake, make_rng(config.seed, _EVAL_STREAM))
    report: Dict[str, Any] = {
        "variant": bundle.variant.value,
        "fid_clean": frechet_distance(stats_r, feature_stats(x_g, extractor)),
        "extractor_fingerprint": extractor.fingerprint,
        "num_real": stats_r.n,
        "num_fake": config.eval.num_fake,
        "note": DESK_SCALE_NOTE.format(real=stats_r.n, fake=config.eval.num_fake),
    }
    if bundle.has_noise_generator or bundle.noise_spec is not None:
        report["fid_noisy"] = frechet_distance(stats_r, feature_stats(y_g, extractor))
    if bundle.variant is Variant.P_AMBIENT:
        report["p_sigma"] = float(bundle.ema_g_n())
    return report


def evaluate_run(checkpoint: str | Path, config: ExperimentConfig) -> Dict[str, Any]:
    """Evaluate a saved generator checkpoint and write ``report.json``."""
    paths = RunPaths(Path(config.out_dir)).prepare()
    bundle, payload = load_bundle(checkpoint)
    data = build_dataset(config)
    report = evaluate_bundle(bundle, config, data.test, paths)
    report["iteration"] = payload["iteration"]
    atomic_write_json(paths.report, report)
    logger.info("evaluation: fid_clean=%.4f", report["fid_clean"])
    return report


# ---------------------------------------------------------------------- #
# runs
# ---------------------------------------------------------------------- #
def _start_run(config: ExperimentConfig) -> RunPaths:
    paths = RunPaths(Path(config.out_dir)).prepare()
    nrgan_logging.attach_run_log(paths.run_log)
    atomic_write_json(paths.config, config.to_dict())
    return paths


def build_data(config: ExperimentConfig) -> MaterializedDataset:
    """Materialize the dataset and write its manifest and tensors under ``out_dir``."""
    paths = _start_run(config)
    data = build_dataset(config)
    atomic_write_json(paths.manifest, data.manifest.to_dict())
    torch.save(
        {"train": data.train.data, "train_clean": data.train_clean.data, "test": data.test.data},
        paths.root / "data.pt",
    )
    return data


def _save_generator(trainer: Trainer, path: Path) -> None:
    state = trainer.training_state()
    save_checkpoint(
        path,
        "generator",
        trainer.bundle,
        trainer.bundle.metadata(),
        extra_modules=state["extra_modules"],
        optimizers=state["optimizers"],
        rng=state["rng"],
        iteration=state["iteration"],
    )


def run_experiment(config: ExperimentConfig, resume_from: str | Path | None = None) -> Dict[str, Any]:
    """Train the configured GAN variant end to end and return the final report.

    ``resume_from`` continues from a generator checkpoint of the same run:
    parameters, optimizers, the latent stream and the iteration count are
    restored, and metrics are appended to the existing stream.

    Raises :class:`DivergenceError` after writing the ``DIVERGED`` marker
    when a step diverges; artifacts written so far are kept.
    """
    paths = _start_run(config)
    if config.model.preset == "oracle":
        raise ConfigurationError("the oracle bundle is not trainable")
    data = build_dataset(config)
    atomic_write_json(paths.manifest, data.manifest.to_dict())

    # the run seed and train.seed together pick the training stream
    train_cfg = replace(config.train, seed=derive_seed(config.seed, config.train.seed))
    with seeded_init(derive_seed(train_cfg.seed, _INIT_STREAM)):
        bundle = bundle_from_config(config)
        trainer = Trainer(bundle, train_cfg, data_noise=config.noise)
    if resume_from is not None:
        trainer.load_training_state(load_checkpoint(resume_from, kind="generator", variant=bundle.variant.value))
        logger.info("resuming from %s at iteration %d", resume_from, trainer.iteration)
    metrics = MetricsLog(paths.metrics, fresh=resume_from is None)
    if resume_from is not None:
        metrics.write({"event": "resume", "iteration": trainer.iteration})
    else:
        metrics.write(
            {
                "event": "start",
                "variant": bundle.variant.value,
                "num_train": len(data.train),
                "note": DESK_SCALE_NOTE.format(
                    real=min(config.eval.num_real, len(data.test)), fake=config.eval.num_fake
                ),
            }
        )
    grid_rng_seed = derive_seed(config.seed, _EVAL_STREAM, 1)
    rows, cols = config.eval.grid_rows, config.eval.grid_cols

    def write_grid(tag: str) -> None:
        x_g, y_g = sample_batches(bundle, rows * cols, make_rng(grid_rng_seed))
        emit_grid(x_g, rows, cols, paths.grids / f"clean_{tag}.png")
        if bundle.has_noise_generator:
            emit_grid(y_g, rows, cols, paths.grids / f"noisy_{tag}.png")

    for index in range(trainer.iteration, train_cfg.iterations):
        # batches are keyed by iteration
        batch_rng = make_rng(config.seed, _BATCH_STREAM, index)
        idx = torch.randint(0, len(data.train), (train_cfg.batch_size,), generator=batch_rng)
        step = trainer.step(data.train.select(idx))
        if step.diverged:
            metrics.write(step.to_dict(train_cfg.log_wall_clock))
            _save_generator(trainer, paths.generator_ckpt())
            paths.diverged.write_text(
                f"diverged at iteration {step.iteration}; parameters rolled back\n", encoding="utf-8"
            )
            raise DivergenceError(f"training diverged at iteration {step.iteration}")
        it = step.iteration
        if config.eval.eval_every and it % config.eval.eval_every == 0:
            step.eval = {"fid_clean": evaluate_bundle(bundle, config, data.test, paths)["fid_clean"]}
        if it % train_cfg.log_every == 0 or step.eval:
            metrics.write(step.to_dict(train_cfg.log_wall_clock))
        if it % train_cfg.checkpoint_every == 0:
            _save_generator(trainer, paths.generator_ckpt(it))
        if it % train_cfg.grid_every == 0:
            write_grid(f"{it:07d}")

    _save_generator(trainer, paths.generator_ckpt())
    write_grid("last")
    report = evaluate_bundle(bundle, config, data.test, paths)
    report["iteration"] = trainer.iteration
    atomic_write_json(paths.report, report)
    metrics.write({"event": "end", "iteration": trainer.iteration, "fid_clean": report["fid_clean"]})
    logger.info("run finished: %d iterations, fid_clean=%.4f", trainer.iteration, report["fid_clean"])
    return report


def _noisy_test(config: ExperimentConfig, test: ImageBatch) -> ImageBatch:
    """Corrupt the clean test split with per-image seeds (denoising evaluation only)."""
    rows = [
        sample_noise(config.noise, test.select(slice(i, i + 1)), make_rng(config.seed, _TEST_NOISE_STREAM, i))[1].data
        for i in range(len(test))
    ]
    return ImageBatch(torch.cat(rows))


@torch.no_grad()
def denoise_report(net, config: ExperimentConfig, test: ImageBatch) -> Dict[str, float]:
    """Mean per-image PSNR of the denoiser and of the noisy input on the test split."""
    clean = test.to_range(ValueRange.HALF_UNIT)
    noisy = _noisy_test(config, test).to_range(ValueRange.HALF_UNIT)
    estimate = net(noisy) if isinstance(net, ExternalBaseline) else denoise_image(net, noisy)
    return {
        "psnr_denoised": mean_psnr(clean.data, estimate.data, peak=1.0),
        "psnr_noisy": mean_psnr(clean.data, noisy.data, peak=1.0),
    }


def run_denoiser(config: ExperimentConfig, generator_checkpoint: str | Path | None = None) -> Dict[str, Any]:
    """Train the configured denoising scheme and report test PSNR."""
    paths = _start_run(config)
    data = build_dataset(config)
    atomic_write_json(paths.manifest, data.manifest.to_dict())
    dcfg = replace(config.denoise, seed=derive_seed(config.seed, config.denoise.seed))
    scheme = Scheme(dcfg.scheme)

    if dcfg.external_command:
        report = denoise_report(ExternalBaseline(dcfg.external_command), config, data.test)
        report["scheme"] = "external"
        atomic_write_json(paths.report, report)
        return report

    bundle = None
    if scheme is Scheme.GN2GC:
        if generator_checkpoint is not None:
            bundle, _ = load_bundle(generator_checkpoint)
        elif config.model.preset == "oracle":
            bundle = bundle_from_config(config)
        else:
            raise ConfigurationError("GN2GC needs --generator or model.preset=oracle")

    with seeded_init(derive_seed(dcfg.seed, _INIT_STREAM)):
        net = DenoiserNet(config.data.channels)
    net, history = train_denoiser(
        dcfg,
        net=net,
        clean=data.train_clean,
        noisy=data.train,
        noise_spec=config.noise,
        bundle=bundle,
    )
    metrics = MetricsLog(paths.metrics)
    for record in history:
        metrics.write(record)
    save_checkpoint(
        paths.ckpt / "denoiser.pt",
        "denoiser",
        net,
        {"variant": scheme.value, "channels": net.channels},
        iteration=dcfg.iterations,
    )
    report: Dict[str, Any] = {"scheme": scheme.value, **denoise_report(net, config, data.test)}
    atomic_write_json(paths.report, report)
    logger.info(
        "denoiser %s: psnr %.2f dB (noisy input %.2f dB)",
        scheme.value, report["psnr_denoised"], report["psnr_noisy"],
    )
    return report


def load_denoiser(path: str | Path) -> DenoiserNet:
    payload = load_checkpoint(path, kind="denoiser")
    net = DenoiserNet(payload["metadata"]["channels"])
    net.load_state_dict(payload["state"])
    net.eval()
    return net


@torch.no_grad()
def denoise_directory(checkpoint: str | Path, in_dir: str | Path, out_dir: str | Path) -> List[Path]:
    """Denoise every image in ``in_dir`` into PNGs of the same name in ``out_dir``."""
    net = load_denoiser(checkpoint)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    files = sorted(p for p in Path(in_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValidationError(f"no images found in {in_dir}")
    for p in files:
        with Image.open(p) as im:
            mode = "L" if net.channels == 1 else "RGB"
            a = np.asarray(im.convert(mode), dtype=np.float32)
        a = a[..., None] if a.ndim == 2 else a
        y = ImageBatch(torch.from_numpy(a)[None] / 255.0 - 0.5, ValueRange.HALF_UNIT)
        x = denoise_image(net, y)
        written.append(emit_grid(x, 1, 1, out_dir / (p.stem + ".png")))
    logger.info("denoised %d images into %s", len(written), out_dir)
    return written


def grid_from_checkpoint(checkpoint: str | Path, config: ExperimentConfig, path: str | Path) -> Path:
    bundle, _ = load_bundle(checkpoint)
    rows, cols = config.eval.grid_rows, config.eval.grid_cols
    x_g, _ = sample_batches(bundle, rows * cols, make_rng(config.seed, _EVAL_STREAM, 1))
    return emit_grid(x_g, rows, cols, path)
