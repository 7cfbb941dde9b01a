"""Adversarial objectives and the alternating training loop.

One :meth:`Trainer.step` is a discriminator update (non-saturating loss plus
R1 on real samples) followed by a generator update from a fresh forward
pass (non-saturating loss minus the diversity-sensitive term), then the EMA
update of both generators. A step whose loss is non-finite or exceeds
``DIVERGENCE_LIMIT`` in magnitude is undone.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Callable, Dict, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .error_handler import ConfigurationError, DivergenceError, PreconditionError, ValidationError
from .filters import binomial_kernel1d, depthwise_filter
from .networks import ResNetDiscriminator, ResNetGenerator
from .noise_zoo import ImageBatch, NoiseSpec, ValueRange, ambient_forward
from .nr_generators import (
    GeneratorBundle,
    LatentRole,
    Variant,
    compose_observation,
    generate_clean,
    noise_from_variant,
    sample_latent,
)
from .seeding import make_rng

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e4
UPDATE_ORDER = "discriminator,generator"
_RNG_STREAM = 1


class FilterMode(str, Enum):
    NONE = "none"
    BLUR = "blur"
    BLURVH = "blurvh"


@dataclass
class TrainConfig:
    """Optimisation settings shared by every GAN variant."""

    iterations: int = 2000
    batch_size: int = 64
    lr: float = 0.0002
    beta1: float = 0.0
    beta2: float = 0.99
    r1_gamma: float = 10.0
    ds_lambda: float = 0.02
    ds_tau: float = 0.0  # <= 0 disables clipping
    filter_mode: str = "none"
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    grid_every: int = 1000
    allow_unfiltered_poisson: bool = False
    log_wall_clock: bool = False

    def validate(self) -> None:
        problems = []
        if self.iterations < 0:
            problems.append("iterations must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("Adam betas must lie in [0, 1)")
        if self.r1_gamma < 0 or self.ds_lambda < 0:
            problems.append("r1_gamma and ds_lambda must be >= 0")
        if not 0 <= self.ema_decay < 1:
            problems.append("ema_decay must lie in [0, 1)")
        for key in ("log_every", "checkpoint_every", "grid_every"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if self.filter_mode not in {m.value for m in FilterMode}:
            problems.append(f"unknown filter_mode '{self.filter_mode}'")
        if problems:
            raise ValidationError("invalid train config: " + "; ".join(problems))

    def check_compatible(self, variant: Variant | str, data_noise: Optional[NoiseSpec]) -> None:
        """Poisson-family data needs the blurvh filter unless explicitly overridden."""
        variant = Variant(variant)
        if (
            data_noise is not None
            and data_noise.is_poisson_family
            and variant is not Variant.GAN
            and self.filter_mode != FilterMode.BLURVH.value
            and not self.allow_unfiltered_poisson
        ):
            raise ConfigurationError(
                f"{variant.value} on Poisson-family noise needs filter_mode=blurvh "
                "(or allow_unfiltered_poisson=true)"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainMetrics:
    iteration: int
    loss_g: float
    loss_d: float
    r1: float
    ds: float
    wall_clock: Optional[float] = None
    diverged: bool = False
    eval: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_wall_clock: bool = False) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "iteration": self.iteration,
            "order": UPDATE_ORDER,
            "loss_g": self.loss_g,
            "loss_d": self.loss_d,
            "r1": self.r1,
            "ds": self.ds,
            "diverged": self.diverged,
        }
        if include_wall_clock and self.wall_clock is not None:
            out["wall_clock"] = self.wall_clock
        if self.eval:
            out["eval"] = dict(self.eval)
        return out


# ---------------------------------------------------------------------- #
# objectives
# ---------------------------------------------------------------------- #
def _check_finite(name: str, value: torch.Tensor) -> None:
    v = value.detach()
    if not bool(torch.isfinite(v).all()):
        raise DivergenceError(f"{name} is not finite")
    if v.numel() == 1 and abs(float(v)) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{name}={float(v):.4g} exceeds {DIVERGENCE_LIMIT:g}")


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating losses ``(loss_d, loss_g)`` from discriminator logits."""
    _check_finite("real logits", d_real)
    _check_finite("fake logits", d_fake)
    loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    loss_g = F.softplus(-d_fake).mean()
    return loss_d, loss_g


def r1_penalty(
    discriminator: Callable[[torch.Tensor], torch.Tensor],
    y_real: torch.Tensor,
    gamma: float = 10.0,
) -> torch.Tensor:
    """``gamma / 2 * E[|grad_y D(y_real)|^2]``, differentiable in D's parameters."""
    if not y_real.requires_grad:
        raise ConfigurationError("R1 penalty needs real samples that track gradients")
    out = discriminator(y_real)
    if not out.requires_grad:
        raise ConfigurationError("discriminator output does not depend on its input")
    (grad,) = torch.autograd.grad(
        outputs=out.sum(), inputs=y_real, create_graph=True, allow_unused=True
    )
    if grad is None:
        return out.sum() * 0.0
    sq = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1)
    return 0.5 * gamma * sq.mean()


def ds_regularizer(
    g_n: Callable[[torch.Tensor], torch.Tensor],
    z1: torch.Tensor,
    z2: torch.Tensor,
    lam: float,
    tau: float = 0.0,
) -> torch.Tensor:
    """Diversity-sensitive value ``lam * E[clip(|g(z1)-g(z2)|_1 / |z1-z2|_1, tau)]``.

    Norms are per-element mean absolute differences. ``tau <= 0`` disables
    clipping. Pairs with ``z1 == z2`` are left out. The caller subtracts the
    value from the generator loss.
    """
    dz = (z1 - z2).abs().reshape(z1.shape[0], -1).mean(dim=1)
    valid = dz > 0
    if not bool(valid.any()):
        return z1.new_zeros(())
    out1, out2 = g_n(z1[valid]), g_n(z2[valid])
    dout = (out1 - out2).abs().reshape(out1.shape[0], -1).mean(dim=1)
    ratio = dout / dz[valid]
    if tau > 0:
        ratio = torch.clamp(ratio, max=tau)
    return lam * ratio.mean()


def blur_filter_bank(y: torch.Tensor, mode: FilterMode | str) -> torch.Tensor:
    """Low-pass the discriminator input.

    ``blur`` uses the outer product of ``[1, 2, 1] / 4``; ``blurvh`` stacks
    the vertically and horizontally filtered copies along channels.
    """
    try:
        mode = FilterMode(mode)
    except ValueError:
        raise ValidationError(f"unknown filter mode '{mode}'") from None
    if mode is FilterMode.NONE:
        return y
    k = binomial_kernel1d(3)
    if mode is FilterMode.BLUR:
        return depthwise_filter(y, k[:, None] * k[None, :])
    vertical = depthwise_filter(y, k[:, None])
    horizontal = depthwise_filter(y, k[None, :])
    return torch.cat([vertical, horizontal], dim=-1)


class FilteredDiscriminator(nn.Module):
    """Discriminator behind a fixed filter, so real, fake and R1 paths agree."""

    def __init__(self, discriminator: nn.Module, mode: FilterMode | str = FilterMode.NONE):
        super().__init__()
        self.discriminator = discriminator
        self.mode = FilterMode(mode)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.discriminator(blur_filter_bank(y, self.mode))


@torch.no_grad()
def ema_update(shadow: nn.Module, current: nn.Module, decay: float) -> nn.Module:
    """``shadow = decay * shadow + (1 - decay) * current`` over parameters and buffers."""
    if not 0.0 <= decay <= 1.0:
        raise ValidationError(f"decay must lie in [0, 1] (got {decay})")
    s_state = dict(shadow.named_parameters()) | dict(shadow.named_buffers())
    c_state = dict(current.named_parameters()) | dict(current.named_buffers())
    if s_state.keys() != c_state.keys():
        raise ValidationError("EMA shadow and current module have different parameters")
    for name, s in s_state.items():
        c = c_state[name]
        if s.shape != c.shape:
            raise ValidationError(
                f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(c.shape)}"
            )
        if s.is_floating_point():
            s.lerp_(c, 1.0 - decay)
        else:
            s.copy_(c)
    return shadow


# ---------------------------------------------------------------------- #
# training loop
# ---------------------------------------------------------------------- #
def fake_observation(bundle: GeneratorBundle, n: int, rng) -> ImageBatch:
    """Generated observation for the discriminator, differentiable in the generators."""
    z_x = sample_latent(n, bundle.z_dim, LatentRole.IMAGE, rng)
    x_g = generate_clean(bundle, z_x)
    if bundle.variant is Variant.GAN:
        return x_g
    if bundle.variant is Variant.AMBIENT:
        return ambient_forward(bundle.noise_spec, x_g, rng)
    z_n = sample_latent(n, bundle.z_dim, LatentRole.NOISE, rng)
    eps = torch.randn(x_g.shape, generator=rng, dtype=x_g.data.dtype)
    n_g = noise_from_variant(bundle, z_n, z_x, x_g, eps, rng)
    return compose_observation(x_g, n_g)


class Trainer:
    """Holds the discriminator, optimisers and random stream for one run."""

    def __init__(
        self,
        bundle: GeneratorBundle,
        config: TrainConfig,
        data_noise: Optional[NoiseSpec] = None,
        discriminator: Optional[nn.Module] = None,
    ):
        config.validate()
        config.check_compatible(bundle.variant, data_noise)
        self.bundle = bundle
        self.config = config
        mode = FilterMode(config.filter_mode)
        if discriminator is None:
            in_ch = bundle.channels * (2 if mode is FilterMode.BLURVH else 1)
            discriminator = ResNetDiscriminator(bundle.preset, in_channels=in_ch)
        self.discriminator = FilteredDiscriminator(discriminator, mode)
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(list(bundle.generator_parameters()), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=config.lr, betas=betas)
        self.rng = make_rng(config.seed, _RNG_STREAM)
        self.iteration = 0
        self.divergences = 0

    @property
    def uses_ds(self) -> bool:
        return self.config.ds_lambda > 0 and isinstance(self.bundle.g_n, ResNetGenerator)

    def _snapshot(self) -> Dict[str, Any]:
        return copy.deepcopy(
            {
                "bundle": self.bundle.state_dict(),
                "discriminator": self.discriminator.state_dict(),
                "opt_g": self.opt_g.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "rng": self.rng.get_state(),
            }
        )

    def _restore(self, snap: Dict[str, Any]) -> None:
        self.bundle.load_state_dict(snap["bundle"])
        self.discriminator.load_state_dict(snap["discriminator"])
        self.opt_g.load_state_dict(snap["opt_g"])
        self.opt_d.load_state_dict(snap["opt_d"])
        self.rng.set_state(snap["rng"])

    def _ds_term(self, n: int) -> torch.Tensor:
        bundle = self.bundle
        z1 = sample_latent(n, bundle.z_dim, LatentRole.NOISE, self.rng).z
        z2 = sample_latent(n, bundle.z_dim, LatentRole.NOISE, self.rng).z
        if bundle.noise_latent_dim != bundle.z_dim:
            z_x = sample_latent(n, bundle.z_dim, LatentRole.IMAGE, self.rng).z
            z1, z2 = torch.cat([z1, z_x], dim=1), torch.cat([z2, z_x], dim=1)
        return ds_regularizer(bundle.g_n, z1, z2, self.config.ds_lambda, self.config.ds_tau)

    def _update(self, real: torch.Tensor) -> tuple[float, float, float, float]:
        cfg = self.config
        n = real.shape[0]
        D = self.discriminator

        # discriminator
        self.opt_d.zero_grad(set_to_none=True)
        with torch.no_grad():
            y_fake = fake_observation(self.bundle, n, self.rng).data
        y_real = real.detach().requires_grad_(True)
        loss_d, _ = gan_losses(D(y_real), D(y_fake))
        r1 = r1_penalty(D, y_real, cfg.r1_gamma) if cfg.r1_gamma > 0 else loss_d.new_zeros(())
        total_d = loss_d + r1
        _check_finite("discriminator loss", total_d)
        total_d.backward()
        self.opt_d.step()

        # generator, from a fresh forward pass
        self.opt_g.zero_grad(set_to_none=True)
        y_fake = fake_observation(self.bundle, n, self.rng).data
        loss_g = F.softplus(-D(y_fake)).mean()
        ds = self._ds_term(n) if self.uses_ds else loss_g.new_zeros(())
        total_g = loss_g - ds
        _check_finite("generator loss", total_g)
        total_g.backward()
        self.opt_g.step()

        ema_update(self.bundle.ema_g_x, self.bundle.g_x, cfg.ema_decay)
        if self.bundle.g_n is not None:
            ema_update(self.bundle.ema_g_n, self.bundle.g_n, cfg.ema_decay)
        return float(loss_g), float(loss_d), float(r1), float(ds)

    def step(self, real_batch: ImageBatch) -> TrainMetrics:
        """Run one alternating update; a divergent step is rolled back."""
        if real_batch.value_range is not ValueRange.SYMMETRIC_UNIT:
            raise PreconditionError("training images must be in the symmetric_unit range")
        start = time.perf_counter()
        snap = self._snapshot()
        try:
            loss_g, loss_d, r1, ds = self._update(real_batch.data)
        except DivergenceError as e:
            self._restore(snap)
            self.divergences += 1
            logger.warning("step %d diverged, parameters rolled back: %s", self.iteration, e)
            nan = float("nan")
            return TrainMetrics(self.iteration, nan, nan, nan, nan,
                                wall_clock=time.perf_counter() - start, diverged=True)
        self.iteration += 1
        metrics = TrainMetrics(self.iteration, loss_g, loss_d, r1, ds,
                               wall_clock=time.perf_counter() - start)
        if self.iteration % self.config.log_every == 0:
            logger.info(
                "iter %d  loss_g=%.4f  loss_d=%.4f  r1=%.4f  ds=%.4f  (%.3fs)",
                self.iteration, loss_g, loss_d, r1, ds, metrics.wall_clock,
            )
        return metrics

    # checkpoint helpers
    def training_state(self) -> Dict[str, Any]:
        return {
            "extra_modules": {"discriminator": self.discriminator},
            "optimizers": {"generator": self.opt_g, "discriminator": self.opt_d},
            "rng": self.rng,
            "iteration": self.iteration,
        }

    def load_training_state(self, payload: Dict[str, Any]) -> None:
        self.bundle.load_state_dict(payload["state"])
        self.discriminator.load_state_dict(payload["extra"]["discriminator"])
        self.opt_g.load_state_dict(payload["optimizers"]["generator"])
        self.opt_d.load_state_dict(payload["optimizers"]["discriminator"])
        if payload.get("rng_state") is not None:
            self.rng.set_state(payload["rng_state"])
        self.iteration = int(payload["iteration"])
