"""Noise models A-P: samplers and the differentiable measurement operator.

Parameters are given on the [0, 255] pixel scale and converted internally
(``sigma_norm = 2 * sigma / 255``) because images live on [-1, 1]. Noisy
images are never clipped: ``y = x + n`` exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Tuple

import torch

from .error_handler import PreconditionError, ValidationError
from .filters import depthwise_filter, gaussian_kernel2d

__all__ = [
    "NoiseVariant",
    "NoiseFamily",
    "ValueRange",
    "ImageBatch",
    "NoiseSpec",
    "sample_noise",
    "make_local_mask",
    "brown_filter",
    "ambient_forward",
    "to_normalized",
]

logger = logging.getLogger(__name__)

PIXEL_SCALE = 255.0
_SQRT_FLOOR = 1e-12


class ValueRange(str, Enum):
    SYMMETRIC_UNIT = "symmetric_unit"  # [-1, 1]
    HALF_UNIT = "half_unit"  # [-0.5, 0.5]

    @property
    def bounds(self) -> Tuple[float, float]:
        return (-1.0, 1.0) if self is ValueRange.SYMMETRIC_UNIT else (-0.5, 0.5)

    @property
    def width(self) -> float:
        lo, hi = self.bounds
        return hi - lo


class NoiseVariant(str, Enum):
    A = "A"  # additive Gaussian, fixed sigma
    B = "B"  # additive Gaussian, variable sigma
    C = "C"  # local Gaussian, fixed patch
    D = "D"  # local Gaussian, variable patch
    E = "E"  # uniform
    F = "F"  # mixture
    G = "G"  # Brown Gaussian
    H = "H"  # additive Brown Gaussian
    I = "I"  # noqa: E741  multiplicative Gaussian, fixed sigma
    J = "J"  # multiplicative Gaussian, variable sigma
    K = "K"  # few additive + multiplicative
    L = "L"  # much additive + multiplicative
    M = "M"  # Poisson, fixed lambda
    N = "N"  # Poisson, variable lambda
    O = "O"  # noqa: E741  few additive + Poisson
    P = "P"  # much additive + Poisson


class NoiseFamily(str, Enum):
    SIGNAL_INDEPENDENT = "signal_independent"
    MULTIPLICATIVE = "multiplicative"
    POISSON = "poisson"


_V = NoiseVariant
_VARIABLE_SIGMA = {_V.B, _V.J}
_GAUSSIAN_SIGMA = {_V.A, _V.B, _V.C, _V.D, _V.G, _V.H}
_MULTIPLICATIVE = {_V.I, _V.J, _V.K, _V.L}
_POISSON = {_V.M, _V.N, _V.O, _V.P}
_BROWN = {_V.G, _V.H}


def to_normalized(sigma_px: float | torch.Tensor) -> float | torch.Tensor:
    """Convert a [0, 255]-scale amplitude to the [-1, 1] image scale."""
    return 2.0 * sigma_px / PIXEL_SCALE


@dataclass(frozen=True)
class ImageBatch:
    """Images as an ``[N, H, W, C]`` real tensor with a declared value range."""

    data: torch.Tensor
    value_range: ValueRange = ValueRange.SYMMETRIC_UNIT

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValidationError(
                f"ImageBatch must be [N, H, W, C] (got shape {tuple(self.data.shape)})"
            )
        if not self.data.is_floating_point():
            raise ValidationError(f"ImageBatch must be real-valued (got {self.data.dtype})")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise ValidationError("ImageBatch contains non-finite entries")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def within_range(self, atol: float = 1e-6) -> bool:
        lo, hi = self.value_range.bounds
        d = self.data.detach()
        return bool((d >= lo - atol).all() and (d <= hi + atol).all())

    def to_range(self, target: ValueRange) -> "ImageBatch":
        if target is self.value_range:
            return self
        if target is ValueRange.HALF_UNIT:
            return ImageBatch(self.data * 0.5, target)
        return ImageBatch(self.data * 2.0, target)

    def select(self, index: torch.Tensor | slice) -> "ImageBatch":
        return ImageBatch(self.data[index], self.value_range)


@dataclass(frozen=True)
class NoiseSpec:
    """One of the 16 corruption models with its parameters (pixel scale).

    Fixed-parameter variants read ``sigma``/``patch_h``/``patch_w``/``lam``;
    variable ones (B, D, J, N) read the ``*_lo``/``*_hi`` ranges and redraw
    the parameter per image. ``sigma_add`` is the additive Gaussian part of
    K, L, O and P; ``sigma`` is the multiplicative part of I-L.
    """

    variant: NoiseVariant
    sigma: float = 25.0
    sigma_lo: float | None = None
    sigma_hi: float | None = None
    sigma_add: float = 0.0
    patch_h: int | None = None
    patch_w: int | None = None
    patch_lo: int | None = None
    patch_hi: int | None = None
    lam: float | None = None
    lam_lo: float | None = None
    lam_hi: float | None = None
    bound: float = 50.0
    kernel: int = 5
    brown_renormalize: bool = True
    mixture: Tuple[Tuple[float, "NoiseSpec"], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "variant", NoiseVariant(self.variant))
        object.__setattr__(
            self, "mixture", tuple((float(w), s) for w, s in self.mixture)
        )
        problems = self.violations()
        if problems:
            raise ValidationError(
                f"invalid noise spec (variant {self.variant.value}): "
                + "; ".join(problems)
            )

    # ------------------------------------------------------------------ #
    # invariants
    # ------------------------------------------------------------------ #
    def violations(self) -> List[str]:
        """Return the list of violated invariants (empty when valid)."""
        v = self.variant
        out: List[str] = []
        if self.sigma < 0:
            out.append("sigma must be >= 0")
        if self.sigma_add < 0:
            out.append("sigma_add must be >= 0")
        if self.bound < 0:
            out.append("bound must be >= 0")
        if v in _VARIABLE_SIGMA:
            if self.sigma_lo is None or self.sigma_hi is None:
                out.append("variable-sigma variants need sigma_lo and sigma_hi")
            elif not 0 <= self.sigma_lo <= self.sigma_hi:
                out.append("sigma range must satisfy 0 <= sigma_lo <= sigma_hi")
        if v is _V.C:
            if self.patch_h is None or self.patch_w is None:
                out.append("local noise needs patch_h and patch_w")
            elif self.patch_h < 1 or self.patch_w < 1:
                out.append("patch sizes must be >= 1")
        if v is _V.D:
            if self.patch_lo is None or self.patch_hi is None:
                out.append("variable local noise needs patch_lo and patch_hi")
            elif not 1 <= self.patch_lo <= self.patch_hi:
                out.append("patch range must satisfy 1 <= patch_lo <= patch_hi")
        if v in {_V.M, _V.O, _V.P}:
            if self.lam is None or self.lam <= 0:
                out.append("lam must be > 0")
        if v is _V.N:
            if self.lam_lo is None or self.lam_hi is None:
                out.append("variable Poisson noise needs lam_lo and lam_hi")
            elif not 0 < self.lam_lo <= self.lam_hi:
                out.append("lam range must satisfy 0 < lam_lo <= lam_hi")
        if v in _BROWN and (self.kernel < 3 or self.kernel % 2 == 0):
            out.append("kernel must be odd and >= 3")
        if v is _V.F:
            if not self.mixture:
                out.append("mixture variant needs at least one component")
            else:
                weights = [w for w, _ in self.mixture]
                if any(w <= 0 for w in weights):
                    out.append("mixture weights must be positive")
                if abs(math.fsum(weights) - 1.0) > 1e-9:
                    out.append("mixture weights must sum to 1")
                if any(s.variant is _V.F for _, s in self.mixture):
                    out.append("mixture components cannot be mixtures")
        return out

    # ------------------------------------------------------------------ #
    # properties
    # ------------------------------------------------------------------ #
    @property
    def family(self) -> NoiseFamily:
        if self.variant in _POISSON:
            return NoiseFamily.POISSON
        if self.variant in _MULTIPLICATIVE:
            return NoiseFamily.MULTIPLICATIVE
        return NoiseFamily.SIGNAL_INDEPENDENT

    @property
    def is_poisson_family(self) -> bool:
        if self.variant is _V.F:
            return any(s.is_poisson_family for _, s in self.mixture)
        return self.variant in _POISSON

    # ------------------------------------------------------------------ #
    # presets and flat serialization
    # ------------------------------------------------------------------ #
    @classmethod
    def preset(cls, variant: NoiseVariant | str) -> "NoiseSpec":
        """The parameters of the 16 reference noise models."""
        return _PRESETS[NoiseVariant(variant)]()

    def to_flat(self) -> Dict[str, Any]:
        """Flat key-value form; mixture entries become ``mixture.<i>.<key>``."""
        out: Dict[str, Any] = {}
        for f in fields(self):
            if f.name == "mixture":
                continue
            value = getattr(self, f.name)
            out[f.name] = value.value if isinstance(value, Enum) else value
        for i, (weight, sub) in enumerate(self.mixture):
            out[f"mixture.{i}.weight"] = weight
            for key, value in sub.to_flat().items():
                if value is not None:
                    out[f"mixture.{i}.{key}"] = value
        return out

    @classmethod
    def from_flat(cls, data: Dict[str, Any]) -> "NoiseSpec":
        known = {f.name for f in fields(cls)} - {"mixture"}
        kwargs: Dict[str, Any] = {}
        components: Dict[int, Dict[str, Any]] = {}
        for key, value in data.items():
            if key.startswith("mixture."):
                _, index, sub_key = key.split(".", 2)
                components.setdefault(int(index), {})[sub_key] = value
            elif key in known:
                if value is not None:
                    kwargs[key] = value
            else:
                raise ValidationError(f"unknown noise key '{key}'")
        if "variant" not in kwargs:
            raise ValidationError("noise section needs a 'variant' key")
        mixture = []
        for index in sorted(components):
            entry = dict(components[index])
            if "weight" not in entry:
                raise ValidationError(f"mixture entry {index} has no weight")
            weight = entry.pop("weight")
            mixture.append((float(weight), cls.from_flat(entry)))
        if mixture:
            kwargs["mixture"] = tuple(mixture)
        return cls(**kwargs)


_PRESETS = {
    _V.A: lambda: NoiseSpec(_V.A, sigma=25.0),
    _V.B: lambda: NoiseSpec(_V.B, sigma_lo=5.0, sigma_hi=50.0),
    _V.C: lambda: NoiseSpec(_V.C, sigma=25.0, patch_h=16, patch_w=16),
    _V.D: lambda: NoiseSpec(_V.D, sigma=25.0, patch_lo=8, patch_hi=24),
    _V.E: lambda: NoiseSpec(_V.E, sigma=0.0, bound=50.0),
    _V.F: lambda: NoiseSpec(
        _V.F,
        sigma=0.0,
        mixture=(
            (0.1, NoiseSpec(_V.E, sigma=0.0, bound=50.0)),
            (0.2, NoiseSpec(_V.A, sigma=25.0)),
            (0.7, NoiseSpec(_V.A, sigma=15.0)),
        ),
    ),
    _V.G: lambda: NoiseSpec(_V.G, sigma=25.0, kernel=5),
    _V.H: lambda: NoiseSpec(_V.H, sigma=25.0, kernel=5),
    _V.I: lambda: NoiseSpec(_V.I, sigma=25.0),
    _V.J: lambda: NoiseSpec(_V.J, sigma_lo=5.0, sigma_hi=50.0),
    _V.K: lambda: NoiseSpec(_V.K, sigma=25.0, sigma_add=5.0),
    _V.L: lambda: NoiseSpec(_V.L, sigma=25.0, sigma_add=25.0),
    _V.M: lambda: NoiseSpec(_V.M, sigma=0.0, lam=30.0),
    _V.N: lambda: NoiseSpec(_V.N, sigma=0.0, lam_lo=10.0, lam_hi=50.0),
    _V.O: lambda: NoiseSpec(_V.O, sigma=0.0, sigma_add=5.0, lam=30.0),
    _V.P: lambda: NoiseSpec(_V.P, sigma=0.0, sigma_add=25.0, lam=30.0),
}


# ---------------------------------------------------------------------- #
# helpers
# ---------------------------------------------------------------------- #
def _uniform(lo, hi, shape, rng, like: torch.Tensor) -> torch.Tensor:
    u = torch.rand(shape, generator=rng, dtype=like.dtype, device=like.device)
    return lo + (hi - lo) * u


def _gaussian(sigma_norm, like: torch.Tensor, rng) -> torch.Tensor:
    eps = torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device)
    return sigma_norm * eps


def _per_sample_sigma(spec: NoiseSpec, like: torch.Tensor, rng) -> torch.Tensor:
    """Normalized sigma, shape [N, 1, 1, 1], redrawn per image for B/J."""
    n = like.shape[0]
    if spec.variant in _VARIABLE_SIGMA:
        sigma = _uniform(spec.sigma_lo, spec.sigma_hi, (n, 1, 1, 1), rng, like)
    else:
        sigma = torch.full((n, 1, 1, 1), spec.sigma, dtype=like.dtype, device=like.device)
    return to_normalized(sigma)


def _per_sample_lam(spec: NoiseSpec, like: torch.Tensor, rng) -> torch.Tensor:
    n = like.shape[0]
    if spec.variant is _V.N:
        return _uniform(spec.lam_lo, spec.lam_hi, (n, 1, 1, 1), rng, like)
    return torch.full((n, 1, 1, 1), float(spec.lam), dtype=like.dtype, device=like.device)


def _unit01(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 0.5


def make_local_mask(h: int, w: int, p_h: int, p_w: int, rng) -> torch.Tensor:
    """Binary ``[H, W]`` mask with one ``p_h x p_w`` rectangle of ones.

    The top-left corner is uniform over all placements that keep the patch
    inside the image.
    """
    if not (1 <= p_h <= h and 1 <= p_w <= w):
        raise ValidationError(
            f"patch {p_h}x{p_w} does not fit inside a {h}x{w} image"
        )
    top = int(torch.randint(0, h - p_h + 1, (1,), generator=rng))
    left = int(torch.randint(0, w - p_w + 1, (1,), generator=rng))
    mask = torch.zeros(h, w)
    mask[top : top + p_h, left : left + p_w] = 1.0
    return mask


def _local_masks(spec: NoiseSpec, like: torch.Tensor, rng) -> torch.Tensor:
    n, h, w, _ = like.shape
    masks = []
    for _ in range(n):
        if spec.variant is _V.D:
            if spec.patch_hi > min(h, w):
                raise ValidationError(
                    f"patch_hi={spec.patch_hi} exceeds the image side {min(h, w)}"
                )
            p_h = int(torch.randint(spec.patch_lo, spec.patch_hi + 1, (1,), generator=rng))
            p_w = int(torch.randint(spec.patch_lo, spec.patch_hi + 1, (1,), generator=rng))
        else:
            p_h, p_w = spec.patch_h, spec.patch_w
        masks.append(make_local_mask(h, w, p_h, p_w, rng))
    return torch.stack(masks).to(dtype=like.dtype, device=like.device)[..., None]


def _brown(noise: torch.Tensor, kernel: int, renormalize: bool) -> torch.Tensor:
    if kernel < 1 or kernel % 2 == 0:
        raise ValidationError(f"Brown filter kernel must be odd (got {kernel})")
    if kernel == 1:
        return noise
    out = depthwise_filter(noise, gaussian_kernel2d(kernel))
    if not renormalize:
        return out
    dims = (1, 2, 3)
    std_in = noise.std(dim=dims, keepdim=True)
    std_out = out.std(dim=dims, keepdim=True)
    mean_out = out.mean(dim=dims, keepdim=True)
    tiny = torch.finfo(out.dtype).tiny
    ratio = torch.where(
        std_out > tiny, std_in / std_out.clamp_min(tiny), torch.ones_like(std_out)
    )
    return mean_out + (out - mean_out) * ratio


def brown_filter(n: ImageBatch, kernel: int, renormalize: bool = True) -> ImageBatch:
    """Low-pass ``n`` channel-wise with a normalized Gaussian (std = kernel/6).

    With ``renormalize`` the per-image deviation around the mean is rescaled
    so the output has the input's standard deviation; constants stay put.
    """
    return ImageBatch(_brown(n.data, kernel, renormalize), n.value_range)


# ---------------------------------------------------------------------- #
# samplers
# ---------------------------------------------------------------------- #
def _draw(spec: NoiseSpec, x: torch.Tensor, rng, differentiable: bool) -> torch.Tensor:
    v = spec.variant

    if v is _V.F:
        weights = torch.tensor([w for w, _ in spec.mixture], dtype=torch.float64)
        assignment = torch.multinomial(weights, x.shape[0], replacement=True, generator=rng)
        n = torch.zeros_like(x)
        for k, (_, sub) in enumerate(spec.mixture):
            idx = torch.nonzero(assignment == k).flatten()
            if idx.numel():
                n = n.index_copy(0, idx.to(x.device), _draw(sub, x[idx], rng, differentiable))
        return n

    if v is _V.E:
        b = to_normalized(spec.bound)
        return _uniform(-b, b, x.shape, rng, x)

    if v in {_V.A, _V.B}:
        return _gaussian(_per_sample_sigma(spec, x, rng), x, rng)

    if v in {_V.C, _V.D}:
        masks = _local_masks(spec, x, rng)
        return _gaussian(_per_sample_sigma(spec, x, rng), x, rng) * masks

    if v in _BROWN:
        a = _gaussian(_per_sample_sigma(spec, x, rng), x, rng)
        filtered = _brown(a, spec.kernel, spec.brown_renormalize)
        return filtered if v is _V.G else a + filtered

    additive = None
    if spec.sigma_add > 0:
        additive = _gaussian(to_normalized(spec.sigma_add), x, rng)

    if v in _MULTIPLICATIVE:
        sigma = _per_sample_sigma(spec, x, rng)
        n = _gaussian(sigma * _unit01(x), x, rng)
        return n if additive is None else additive + n

    if v in _POISSON:
        lam = _per_sample_lam(spec, x, rng)
        x01 = _unit01(x)
        if differentiable:
            std01 = torch.sqrt(x01.clamp_min(_SQRT_FLOOR) / lam)
            n = 2.0 * _gaussian(std01, x, rng)
        else:
            counts = torch.poisson((lam * x01).clamp_min(0.0), generator=rng)
            n = 2.0 * (counts / lam - x01)
        return n if additive is None else additive + n

    raise ValidationError(f"unsupported noise variant {v}")  # pragma: no cover


def _check_input(x: ImageBatch) -> None:
    if x.value_range is not ValueRange.SYMMETRIC_UNIT:
        raise PreconditionError(
            f"noise models expect symmetric_unit images (got {x.value_range.value})"
        )


def sample_noise(spec: NoiseSpec, x: ImageBatch, rng) -> Tuple[ImageBatch, ImageBatch]:
    """Draw ``n`` for clean ``x`` and return ``(n, y)`` with ``y = x + n``.

    Poisson variants use the exact discrete sampler. Identical
    ``(spec, x, rng seed)`` gives bit-identical output.
    """
    _check_input(x)
    n = _draw(spec, x.data, rng, differentiable=False)
    y = x.data + n
    return ImageBatch(n, x.value_range), ImageBatch(y, x.value_range)


def ambient_forward(spec: NoiseSpec, x: ImageBatch, rng) -> ImageBatch:
    """Pass generated images through the known noise model, keeping gradients.

    Random draws enter as external samples; Poisson variants switch to the
    Gaussian approximation ``y01 ~ N(x01, x01 / lam)``.
    """
    _check_input(x)
    n = _draw(spec, x.data, rng, differentiable=True)
    return ImageBatch(x.data + n, x.value_range)
