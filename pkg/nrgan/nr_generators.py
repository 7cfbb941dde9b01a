"""Clean-image and noise generators for every GAN variant.

A :class:`GeneratorBundle` pairs the clean generator ``g_x`` with the noise
generator ``g_n`` of its variant and keeps EMA shadows of both. The noise
path of each variant is built by :func:`noise_from_variant`:

=============  ===========================================================
SI0            ``n = g_n(z_n)``, unconstrained
SI1            ``n = g_n(z_n) * eps``
SI2            ``n = T(g_n(z_n))`` with rotation, channel shuffle, inversion
SD0            ``n = g_n(z_n ++ z_x)``, unconstrained
SD1_mult       ``n = g_n(z_n) * x01 * eps``
SD1_poisson    ``n = g_n(z_n) * sqrt(x01) * eps``
SD2            ``n = g_n(z_n ++ z_x) * eps``
SD3            ``n = T_inv(g_n(z_n ++ z_x))`` with color inversion only
P-AmbientGAN   ``n = R(x01, sigma) * eps`` with one trainable ``sigma``
=============  ===========================================================
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, Iterator, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .error_handler import PreconditionError, ValidationError
from .networks import BLOCK_STYLE, RESIDUAL_SCALE, ResNetGenerator, get_preset
from .noise_zoo import ImageBatch, NoiseSpec, ValueRange, sample_noise

__all__ = [
    "Variant",
    "Relation",
    "Transform",
    "LatentRole",
    "LatentBatch",
    "ScalarSigma",
    "GeneratorBundle",
    "build_bundle",
    "sample_latent",
    "generate_clean",
    "reparameterize_gaussian",
    "relational_sigma",
    "noise_from_variant",
    "apply_transform",
    "rotate90",
    "compose_observation",
    "sample_observation",
]

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    GAN = "GAN"
    P_AMBIENT = "P-AmbientGAN"
    AMBIENT = "AmbientGAN"
    SI0 = "SI0"
    SI1 = "SI1"
    SI2 = "SI2"
    SD0 = "SD0"
    SD1_MULT = "SD1_mult"
    SD1_POISSON = "SD1_poisson"
    SD2 = "SD2"
    SD3 = "SD3"


class Relation(str, Enum):
    IDENTITY = "identity"
    MULT = "mult"
    SQRT = "sqrt"


class Transform(str, Enum):
    ROTATION = "rotation"
    CHANNEL_SHUFFLE = "channel_shuffle"
    COLOR_INVERSION = "color_inversion"


class LatentRole(str, Enum):
    IMAGE = "image"
    NOISE = "noise"


_SIGMA_HEAD = {Variant.SI1, Variant.SD1_MULT, Variant.SD1_POISSON, Variant.SD2}
_NOISE_HEAD = {Variant.SI0, Variant.SI2, Variant.SD0, Variant.SD3}
_CONCAT_LATENT = {Variant.SD0, Variant.SD2, Variant.SD3}
_DEFAULT_RELATION = {
    Variant.SD1_MULT: Relation.MULT,
    Variant.SD1_POISSON: Relation.SQRT,
}
_ALL_TRANSFORMS = frozenset(Transform)
_SQRT_FLOOR = 1e-12


@dataclass(frozen=True)
class LatentBatch:
    z: torch.Tensor
    role: LatentRole = LatentRole.IMAGE

    def __post_init__(self):
        if self.z.ndim != 2:
            raise ValidationError(f"latent must be [N, d_z] (got shape {tuple(self.z.shape)})")
        if not bool(torch.isfinite(self.z).all()):
            raise ValidationError("latent contains non-finite entries")

    def __len__(self) -> int:
        return self.z.shape[0]


def sample_latent(n: int, dim: int, role: LatentRole, rng, dtype=torch.float32) -> LatentBatch:
    return LatentBatch(torch.randn(n, dim, generator=rng, dtype=dtype), LatentRole(role))


class ScalarSigma(nn.Module):
    """Single trainable nonnegative amplitude, ``softplus(raw)``."""

    def __init__(self, init: float = 0.1):
        super().__init__()
        if init <= 0:
            raise ValidationError("initial sigma must be > 0")
        raw = torch.log(torch.expm1(torch.tensor(float(init))))
        self.raw = nn.Parameter(raw)

    def forward(self) -> torch.Tensor:
        return F.softplus(self.raw)


def _frozen_copy(module: Optional[nn.Module]) -> Optional[nn.Module]:
    if module is None:
        return None
    shadow = copy.deepcopy(module)
    for p in shadow.parameters():
        p.requires_grad_(False)
    return shadow


class GeneratorBundle(nn.Module):
    """Generators of one variant plus their EMA shadows.

    ``noise_spec`` is the known noise model of AmbientGAN (and of oracle
    bundles built by hand); other variants leave it unset.
    """

    def __init__(
        self,
        variant: Variant | str,
        g_x: nn.Module,
        g_n: Optional[nn.Module] = None,
        *,
        preset: str = "tiny",
        channels: int = 3,
        z_dim: int = 128,
        sigma_max: float = 1.0,
        transforms: Iterable[Transform | str] = (),
        relation: Relation | str = Relation.IDENTITY,
        noise_spec: Optional[NoiseSpec] = None,
    ):
        super().__init__()
        self.variant = Variant(variant)
        self.preset = preset
        self.channels = channels
        self.z_dim = z_dim
        self.sigma_max = sigma_max
        self.transforms: FrozenSet[Transform] = frozenset(Transform(t) for t in transforms)
        self.relation = Relation(relation)
        self.noise_spec = noise_spec
        self.g_x = g_x
        self.g_n = g_n
        self.ema_g_x = _frozen_copy(g_x)
        self.ema_g_n = _frozen_copy(g_n)
        self._check_consistency()

    def _check_consistency(self) -> None:
        v = self.variant
        has_noise_gen = v not in (Variant.GAN, Variant.AMBIENT)
        if has_noise_gen and self.g_n is None:
            raise ValidationError(f"variant {v.value} needs a noise generator")
        if not has_noise_gen and self.g_n is not None:
            raise ValidationError(f"variant {v.value} has no noise generator")
        if v is Variant.AMBIENT and self.noise_spec is None:
            raise ValidationError("AmbientGAN needs a known noise spec")
        if v in (Variant.SI0, Variant.SD0) and self.transforms:
            raise ValidationError(f"variant {v.value} takes no transforms")
        if v is Variant.SD3 and self.transforms != {Transform.COLOR_INVERSION}:
            raise ValidationError("SD3 uses color inversion only")
        if v not in (Variant.SI2, Variant.SD3) and self.transforms:
            raise ValidationError(f"variant {v.value} takes no transforms")
        if v is Variant.P_AMBIENT and not isinstance(self.g_n, ScalarSigma):
            raise ValidationError("P-AmbientGAN noise generator must be a ScalarSigma")

    @property
    def has_noise_generator(self) -> bool:
        return self.g_n is not None

    @property
    def noise_latent_dim(self) -> int:
        return 2 * self.z_dim if self.variant in _CONCAT_LATENT else self.z_dim

    @property
    def p_sigma(self) -> Optional[torch.Tensor]:
        return self.g_n() if isinstance(self.g_n, ScalarSigma) else None

    def generators(self, use_ema: bool = False) -> Tuple[nn.Module, Optional[nn.Module]]:
        if use_ema:
            return self.ema_g_x, self.ema_g_n
        return self.g_x, self.g_n

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.g_x.parameters()
        if self.g_n is not None:
            yield from self.g_n.parameters()

    def metadata(self) -> Dict[str, Any]:
        return {
            "variant": self.variant.value,
            "preset": self.preset,
            "channels": self.channels,
            "z_dim": self.z_dim,
            "sigma_max": self.sigma_max,
            "transforms": sorted(t.value for t in self.transforms),
            "relation": self.relation.value,
            "noise_spec": self.noise_spec.to_flat() if self.noise_spec else None,
            "block_style": BLOCK_STYLE,
            "residual_scale": RESIDUAL_SCALE,
        }


def build_bundle(
    variant: Variant | str,
    preset: str = "tiny",
    channels: int = 3,
    z_dim: int | None = None,
    sigma_max: float = 1.0,
    transforms: Iterable[Transform | str] | None = None,
    relation: Relation | str | None = None,
    noise_spec: Optional[NoiseSpec] = None,
) -> GeneratorBundle:
    """Build a freshly initialised bundle; noise generators share ``g_x``'s preset."""
    variant = Variant(variant)
    arch = get_preset(preset)
    z_dim = int(z_dim or arch.z_dim)

    if transforms is None:
        transforms = {
            Variant.SI2: _ALL_TRANSFORMS,
            Variant.SD3: frozenset({Transform.COLOR_INVERSION}),
        }.get(variant, frozenset())
    if relation is None:
        relation = _DEFAULT_RELATION.get(variant, Relation.IDENTITY)
    relation = Relation(relation)
    if variant in (Variant.SD1_MULT, Variant.SD1_POISSON) and relation is not _DEFAULT_RELATION[variant]:
        raise ValidationError(f"{variant.value} is tied to the {_DEFAULT_RELATION[variant].value} relation")

    g_x = ResNetGenerator(arch, channels, z_dim, head="image")
    g_n: Optional[nn.Module] = None
    noise_dim = 2 * z_dim if variant in _CONCAT_LATENT else z_dim
    if variant in _SIGMA_HEAD:
        g_n = ResNetGenerator(arch, channels, noise_dim, head="sigma", sigma_max=sigma_max)
    elif variant in _NOISE_HEAD:
        g_n = ResNetGenerator(arch, channels, noise_dim, head="noise")
    elif variant is Variant.P_AMBIENT:
        g_n = ScalarSigma()

    logger.debug("built %s bundle (preset=%s, z_dim=%d)", variant.value, preset, z_dim)
    return GeneratorBundle(
        variant,
        g_x,
        g_n,
        preset=preset,
        channels=channels,
        z_dim=z_dim,
        sigma_max=sigma_max,
        transforms=transforms,
        relation=relation,
        noise_spec=noise_spec,
    )


def generate_clean(bundle: GeneratorBundle, z_x: LatentBatch, use_ema: bool = False) -> ImageBatch:
    if z_x.role is not LatentRole.IMAGE:
        raise ValidationError("generate_clean needs an image latent")
    g_x, _ = bundle.generators(use_ema)
    return ImageBatch(g_x(z_x.z), ValueRange.SYMMETRIC_UNIT)


def reparameterize_gaussian(sigma_map: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """``sigma_map * eps``: a Gaussian draw differentiable in ``sigma_map``."""
    if sigma_map.shape != eps.shape:
        raise ValidationError(
            f"sigma map {tuple(sigma_map.shape)} and eps {tuple(eps.shape)} differ"
        )
    if bool((sigma_map.detach() < 0).any()):
        raise PreconditionError("sigma map must be nonnegative")
    return sigma_map * eps


def relational_sigma(sigma: torch.Tensor, x01: torch.Tensor, relation: Relation | str) -> torch.Tensor:
    """Signal-dependent amplitude: ``sigma``, ``sigma * x01`` or ``sigma * sqrt(x01)``."""
    relation = Relation(relation)
    if relation is Relation.IDENTITY:
        return sigma.expand_as(x01) if sigma.shape != x01.shape else sigma
    if relation is Relation.MULT:
        return sigma * x01.clamp_min(0.0)
    return sigma * torch.sqrt(x01.clamp_min(_SQRT_FLOOR))


def rotate90(x: torch.Tensor, k: int) -> torch.Tensor:
    """Rotate NHWC tensors by ``k`` quarter turns in the image plane."""
    return torch.rot90(x, k % 4, dims=(1, 2))


def apply_transform(n_hat: torch.Tensor, transforms: Iterable[Transform | str], rng) -> torch.Tensor:
    """Apply randomly drawn per-image transforms in the order rotation, shuffle, inversion."""
    transforms = {Transform(t) for t in transforms}
    out = n_hat
    n, h, w, c = n_hat.shape
    if Transform.ROTATION in transforms:
        if h != w:
            raise ValidationError(f"rotation needs square images (got {h}x{w})")
        ks = torch.randint(0, 4, (n,), generator=rng)
        out = torch.stack([rotate90(out[i : i + 1], int(k))[0] for i, k in enumerate(ks)])
    if Transform.CHANNEL_SHUFFLE in transforms:
        perm = torch.argsort(torch.rand(n, c, generator=rng), dim=1).to(out.device)
        out = torch.gather(out, 3, perm[:, None, None, :].expand(n, h, w, c))
    if Transform.COLOR_INVERSION in transforms:
        flips = torch.randint(0, 2, (n, 1, 1, c), generator=rng)
        out = out * (1.0 - 2.0 * flips).to(dtype=out.dtype, device=out.device)
    return out


def _noise_input(bundle: GeneratorBundle, z_n: LatentBatch, z_x: Optional[LatentBatch]) -> torch.Tensor:
    if z_n.role is not LatentRole.NOISE:
        raise ValidationError("noise generator needs a noise latent")
    if bundle.variant in _CONCAT_LATENT:
        if z_x is None:
            raise ValidationError(f"{bundle.variant.value} needs the image latent as well")
        return torch.cat([z_n.z, z_x.z], dim=1)
    return z_n.z


def noise_from_variant(
    bundle: GeneratorBundle,
    z_n: Optional[LatentBatch],
    z_x: Optional[LatentBatch],
    x_g: ImageBatch,
    eps: torch.Tensor,
    rng,
    use_ema: bool = False,
) -> ImageBatch:
    """Generate the noise map of ``bundle``'s variant for generated images ``x_g``."""
    v = bundle.variant
    if not bundle.has_noise_generator:
        raise ValidationError(f"variant {v.value} has no noise generator")
    _, g_n = bundle.generators(use_ema)
    x = x_g.data
    if eps.shape != x.shape:
        raise ValidationError(f"eps {tuple(eps.shape)} must match images {tuple(x.shape)}")
    x01 = (x + 1.0) * 0.5

    if v is Variant.P_AMBIENT:
        sigma = relational_sigma(g_n().to(x.dtype), x01, bundle.relation)
        return ImageBatch(reparameterize_gaussian(sigma, eps), x_g.value_range)

    if z_n is None:
        raise ValidationError(f"{v.value} needs a noise latent")
    out = g_n(_noise_input(bundle, z_n, z_x))
    if out.shape != x.shape:
        raise ValidationError(
            f"noise generator output {tuple(out.shape)} does not match images {tuple(x.shape)}"
        )

    if v in (Variant.SI0, Variant.SD0):
        n = out
    elif v in (Variant.SI2, Variant.SD3):
        n = apply_transform(out, bundle.transforms, rng)
    elif v in (Variant.SI1, Variant.SD2):
        n = reparameterize_gaussian(out, eps)
    else:
        n = reparameterize_gaussian(relational_sigma(out, x01, bundle.relation), eps)
    return ImageBatch(n, x_g.value_range)


def compose_observation(x: ImageBatch, n: ImageBatch) -> ImageBatch:
    if x.shape != n.shape:
        raise ValidationError(f"image {tuple(x.shape)} and noise {tuple(n.shape)} differ")
    if x.value_range is not n.value_range:
        raise PreconditionError("image and noise use different value ranges")
    return ImageBatch(x.data + n.data, x.value_range)


@torch.no_grad()
def sample_observation(
    bundle: GeneratorBundle, n: int, rng, use_ema: bool = True
) -> Tuple[ImageBatch, ImageBatch, ImageBatch]:
    """Draw ``(x_g, n_g, y_g)`` with ``y_g = x_g + n_g`` from fresh latents.

    Bundles with a known noise spec use the exact noise sampler; GAN
    returns zero noise.
    """
    z_x = sample_latent(n, bundle.z_dim, LatentRole.IMAGE, rng)
    x_g = generate_clean(bundle, z_x, use_ema=use_ema)
    if bundle.has_noise_generator:
        z_n = sample_latent(n, bundle.z_dim, LatentRole.NOISE, rng)
        eps = torch.randn(x_g.shape, generator=rng, dtype=x_g.data.dtype)
        n_g = noise_from_variant(bundle, z_n, z_x, x_g, eps, rng, use_ema=use_ema)
    elif bundle.noise_spec is not None:
        n_g, _ = sample_noise(bundle.noise_spec, x_g, rng)
    else:
        n_g = ImageBatch(torch.zeros_like(x_g.data), x_g.value_range)
    return x_g, n_g, compose_observation(x_g, n_g)
