"""Versioned checkpoint container for generator bundles and denoisers."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from torch import nn

from .error_handler import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KINDS = ("generator", "denoiser")


def save_checkpoint(
    path: str | Path,
    kind: str,
    module: nn.Module,
    metadata: Dict[str, Any],
    *,
    extra_modules: Optional[Dict[str, nn.Module]] = None,
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
    rng: Optional[torch.Generator] = None,
    iteration: int = 0,
) -> Path:
    """Write ``module`` and its training state; the file appears atomically."""
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "metadata": dict(metadata),
        "iteration": int(iteration),
        "state": module.state_dict(),
        "extra": {k: m.state_dict() for k, m in (extra_modules or {}).items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "rng_state": rng.get_state() if rng is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug("checkpoint written: %s (iteration %d)", path, iteration)
    return path


def load_checkpoint(
    path: str | Path, kind: Optional[str] = None, variant: Optional[str] = None
) -> Dict[str, Any]:
    """Read a checkpoint, rejecting format, kind or variant mismatches."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not an nrgan checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {payload['format_version']} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {payload['kind']}")
    found = payload["metadata"].get("variant")
    if variant is not None and found != variant:
        raise CheckpointError(f"checkpoint holds variant {found}, expected {variant}")
    return payload


def load_bundle(path: str | Path, variant: Optional[str] = None):
    """Rebuild a :class:`GeneratorBundle` (EMA shadows included) from ``path``."""
    from .noise_zoo import NoiseSpec
    from .nr_generators import build_bundle

    payload = load_checkpoint(path, kind="generator", variant=variant)
    meta = payload["metadata"]
    spec = NoiseSpec.from_flat(meta["noise_spec"]) if meta.get("noise_spec") else None
    bundle = build_bundle(
        meta["variant"],
        preset=meta["preset"],
        channels=meta["channels"],
        z_dim=meta["z_dim"],
        sigma_max=meta["sigma_max"],
        transforms=meta["transforms"],
        relation=meta["relation"],
        noise_spec=spec,
    )
    try:
        bundle.load_state_dict(payload["state"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint parameters do not fit the bundle: {e}") from e
    return bundle, payload
