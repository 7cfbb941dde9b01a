"""U-Net denoiser and its five training schemes.

=======  =============================================================
N2C      noisy input, clean target
N2N      two independent noisy realizations of the same clean image
N2V      blind-spot: masked sites take a random 5x5 neighbour's value
N2S      masked sites overwritten with a random color
GN2GC    fresh (x_g + n_g, x_g) pairs from trained EMA generators
=======  =============================================================

The denoiser works in the ``half_unit`` range ``[-0.5, 0.5]``; PSNR is
measured with peak 1.0 on that range.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .error_handler import ConfigurationError, PreconditionError, ValidationError
from .filters import reflect_pad
from .noise_zoo import ImageBatch, NoiseSpec, ValueRange, sample_noise
from .nr_generators import GeneratorBundle, sample_observation
from .seeding import make_rng

logger = logging.getLogger(__name__)

MULTIPLE = 32
_RNG_STREAM = 2


class Scheme(str, Enum):
    N2C = "N2C"
    N2N = "N2N"
    N2V = "N2V"
    N2S = "N2S"
    GN2GC = "GN2GC"


_MASKED = {Scheme.N2V, Scheme.N2S}
DEFAULT_BATCH = {Scheme.N2C: 4, Scheme.N2N: 4, Scheme.GN2GC: 4, Scheme.N2V: 64, Scheme.N2S: 64}


@dataclass(frozen=True)
class PairScheme:
    scheme: Scheme
    num_pixels: int = 64
    kernel: int = 5
    overwrite_lo: float = -0.5
    overwrite_hi: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.num_pixels < 1:
            raise ValidationError("num_pixels must be >= 1")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValidationError(f"mask kernel must be odd and >= 3 (got {self.kernel})")
        if self.overwrite_lo > self.overwrite_hi:
            raise ValidationError("overwrite range must satisfy lo <= hi")


@dataclass
class PairBatch:
    input: ImageBatch
    target: ImageBatch
    loss_mask: torch.Tensor  # [N, H, W, 1], 1 where the loss is evaluated


class DenoiserNet(nn.Module):
    """Five-level U-Net: 48-wide encoder, 96-wide decoder, leaky ReLU (0.1)."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.channels = channels

        def conv(i: int, o: int) -> nn.Conv2d:
            return nn.Conv2d(i, o, 3, padding=1)

        self.enc = nn.ModuleList([conv(channels, 48), conv(48, 48)] + [conv(48, 48) for _ in range(5)])
        self.dec5 = nn.ModuleList([conv(96, 96), conv(96, 96)])
        self.dec4 = nn.ModuleList([conv(144, 96), conv(96, 96)])
        self.dec3 = nn.ModuleList([conv(144, 96), conv(96, 96)])
        self.dec2 = nn.ModuleList([conv(144, 96), conv(96, 96)])
        self.dec1 = nn.ModuleList([conv(96 + channels, 64), conv(64, 32)])
        self.out = conv(32, channels)

    @staticmethod
    def _act(x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(x, 0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """NCHW in, NCHW out."""
        act = self._act
        skips = [x]
        h = act(self.enc[1](act(self.enc[0](x))))
        h = F.max_pool2d(h, 2)
        skips.append(h)  # pool1
        for i in range(2, 6):
            h = F.max_pool2d(act(self.enc[i](h)), 2)
            skips.append(h)  # pool2 .. pool5
        h = act(self.enc[6](h))

        for block, skip in zip((self.dec5, self.dec4, self.dec3, self.dec2, self.dec1), reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skip], dim=1)
            for layer in block:
                h = act(layer(h))
        return self.out(h)


def _check_half_unit(y: ImageBatch) -> None:
    if y.value_range is not ValueRange.HALF_UNIT:
        raise PreconditionError(f"denoiser expects half_unit images (got {y.value_range.value})")


def denoiser_forward(net: DenoiserNet, y: ImageBatch) -> ImageBatch:
    _check_half_unit(y)
    _, h, w, _ = y.shape
    if h % MULTIPLE or w % MULTIPLE:
        raise ValidationError(f"denoiser input must be a multiple of {MULTIPLE} (got {h}x{w})")
    out = net(y.data.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    return ImageBatch(out, ValueRange.HALF_UNIT)


def _forward_padded(net: DenoiserNet, y: torch.Tensor) -> torch.Tensor:
    _, h, w, _ = y.shape
    pad_h, pad_w = (-h) % MULTIPLE, (-w) % MULTIPLE
    x = y.permute(0, 3, 1, 2)
    if pad_h or pad_w:
        # pad bottom/right only, then crop
        x = reflect_pad(x, pad_h, pad_w)[..., pad_h:, pad_w:]
    return net(x)[..., :h, :w].permute(0, 2, 3, 1)


def denoise_image(net: DenoiserNet, y: ImageBatch) -> ImageBatch:
    """Denoise images of any size by reflection padding to a multiple of 32."""
    _check_half_unit(y)
    return ImageBatch(_forward_padded(net, y.data), ValueRange.HALF_UNIT)


def _reflect_index(i: torch.Tensor, size: int) -> torch.Tensor:
    i = i.abs()
    return torch.where(i > size - 1, 2 * (size - 1) - i, i)


def mask_pixels(
    y: ImageBatch, scheme: PairScheme | Scheme | str, rng
) -> Tuple[ImageBatch, torch.Tensor]:
    """Replace ``num_pixels`` sites per image; returns the masked batch and a bool ``[N, H, W]`` site mask.

    Sites are drawn uniformly without replacement. N2V copies a neighbour
    from the ``kernel x kernel`` window (center excluded, borders
    reflected); N2S draws an independent uniform color.
    """
    if not isinstance(scheme, PairScheme):
        scheme = PairScheme(scheme)
    if scheme.scheme not in _MASKED:
        raise ValidationError(f"mask_pixels needs N2V or N2S (got {scheme.scheme.value})")
    data = y.data
    n, h, w, c = data.shape
    if scheme.scheme is Scheme.N2V and (h < scheme.kernel or w < scheme.kernel):
        raise ValidationError(f"image {h}x{w} is smaller than the {scheme.kernel}x{scheme.kernel} kernel")
    if scheme.num_pixels > h * w:
        raise ValidationError(f"cannot select {scheme.num_pixels} sites in a {h}x{w} image")

    sites = torch.argsort(torch.rand(n, h * w, generator=rng), dim=1)[:, : scheme.num_pixels]
    rows, cols = sites // w, sites % w
    batch = torch.arange(n)[:, None].expand_as(sites)
    site_mask = torch.zeros(n, h, w, dtype=torch.bool)
    site_mask[batch, rows, cols] = True

    masked = data.clone()
    if scheme.scheme is Scheme.N2V:
        r = scheme.kernel // 2
        offsets = torch.tensor(
            [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
        )
        pick = torch.randint(0, offsets.shape[0], sites.shape, generator=rng)
        n_rows = _reflect_index(rows + offsets[pick, 0], h)
        n_cols = _reflect_index(cols + offsets[pick, 1], w)
        masked[batch, rows, cols] = data[batch, n_rows, n_cols]
    else:
        lo, hi = scheme.overwrite_lo, scheme.overwrite_hi
        colors = lo + (hi - lo) * torch.rand(n, scheme.num_pixels, c, generator=rng, dtype=data.dtype)
        masked[batch, rows, cols] = colors
    return ImageBatch(masked, y.value_range), site_mask


def make_pairs(
    scheme: PairScheme | Scheme | str,
    rng,
    *,
    clean: Optional[ImageBatch] = None,
    noisy: Optional[ImageBatch] = None,
    noise_spec: Optional[NoiseSpec] = None,
    bundle: Optional[GeneratorBundle] = None,
    batch_size: Optional[int] = None,
) -> PairBatch:
    """Build one training batch of ``(input, target, loss_mask)`` in the half_unit range.

    ``clean``/``noisy`` are symmetric_unit batches. N2C uses ``noisy`` when
    given (the frozen realization of ``clean``) and corrupts ``clean``
    with ``noise_spec`` otherwise.
    """
    if not isinstance(scheme, PairScheme):
        scheme = PairScheme(scheme)
    s = scheme.scheme
    half = ValueRange.HALF_UNIT

    def full(like: ImageBatch) -> torch.Tensor:
        return torch.ones(*like.shape[:3], 1, dtype=like.data.dtype)

    if s is Scheme.N2C:
        if clean is None:
            raise ValidationError("N2C needs clean targets")
        if noisy is None:
            if noise_spec is None:
                raise ValidationError("N2C needs noisy images or a noise spec")
            _, noisy = sample_noise(noise_spec, clean, rng)
        return PairBatch(noisy.to_range(half), clean.to_range(half), full(clean))

    if s is Scheme.N2N:
        if clean is None or noise_spec is None:
            raise ValidationError("N2N needs clean images and a noise spec to draw pairs")
        _, y1 = sample_noise(noise_spec, clean, rng)
        _, y2 = sample_noise(noise_spec, clean, rng)
        return PairBatch(y1.to_range(half), y2.to_range(half), full(clean))

    if s in _MASKED:
        if noisy is None:
            raise ValidationError(f"{s.value} needs noisy images")
        target = noisy.to_range(half)
        masked, sites = mask_pixels(target, scheme, rng)
        return PairBatch(masked, target, sites[..., None].to(target.data.dtype))

    if bundle is None:
        raise ValidationError("GN2GC needs a trained generator bundle")
    n = batch_size or DEFAULT_BATCH[Scheme.GN2GC]
    x_g, _, y_g = sample_observation(bundle, n, rng, use_ema=True)
    return PairBatch(y_g.to_range(half), x_g.to_range(half), full(x_g))


def masked_l2(prediction: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the sites where ``mask`` is 1."""
    weight = mask.expand_as(prediction)
    return ((prediction - target) ** 2 * weight).sum() / weight.sum().clamp_min(1.0)


def ramp_down_factor(step: int, total: int, fraction: float = 0.3) -> float:
    """1 until the last ``fraction`` of training, then linearly down to 0."""
    if total <= 0 or fraction <= 0:
        return 1.0
    start = total * (1.0 - fraction)
    if step < start:
        return 1.0
    return max(0.0, (total - step) / (total * fraction))


@dataclass
class DenoiseConfig:
    scheme: str = "N2C"
    iterations: int = 5000
    batch_size: int = 0  # 0 picks the scheme default
    lr: float = 0.0003
    beta1: float = 0.9
    beta2: float = 0.99
    ramp_fraction: float = 0.3
    num_pixels: int = 64
    kernel: int = 5
    seed: int = 0
    log_every: int = 500
    external_command: str = ""

    def validate(self) -> None:
        Scheme(self.scheme)
        if self.iterations < 0 or self.batch_size < 0:
            raise ValidationError("denoise iterations and batch_size must be >= 0")
        if self.lr < 0 or not 0 <= self.ramp_fraction <= 1:
            raise ValidationError("denoise lr must be >= 0 and ramp_fraction in [0, 1]")
        if self.log_every < 1:
            raise ValidationError("denoise log_every must be >= 1")

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or DEFAULT_BATCH[Scheme(self.scheme)]

    def pair_scheme(self) -> PairScheme:
        return PairScheme(Scheme(self.scheme), num_pixels=self.num_pixels, kernel=self.kernel)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiseConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def train_denoiser(
    config: DenoiseConfig,
    *,
    clean: Optional[ImageBatch] = None,
    noisy: Optional[ImageBatch] = None,
    noise_spec: Optional[NoiseSpec] = None,
    bundle: Optional[GeneratorBundle] = None,
    net: Optional[DenoiserNet] = None,
) -> Tuple[DenoiserNet, List[Dict[str, Any]]]:
    """Train a denoiser with ``config.scheme``; returns the net and its loss history.

    A step with a non-finite loss is skipped, leaving parameters untouched.
    """
    config.validate()
    scheme = config.pair_scheme()
    s = scheme.scheme
    source = noisy if s in _MASKED else clean
    if s is not Scheme.GN2GC and source is None:
        raise ValidationError(f"{s.value} needs {'noisy' if s in _MASKED else 'clean'} training images")
    channels = bundle.channels if s is Scheme.GN2GC else source.shape[-1]
    net = net or DenoiserNet(channels)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: ramp_down_factor(step, config.iterations, config.ramp_fraction)
    )
    rng = make_rng(config.seed, _RNG_STREAM)
    bs = config.effective_batch_size
    history: List[Dict[str, Any]] = []

    for it in range(config.iterations):
        if s is Scheme.GN2GC:
            pairs = make_pairs(scheme, rng, bundle=bundle, batch_size=bs)
        else:
            idx = torch.randint(0, source.shape[0], (bs,), generator=rng)
            pairs = make_pairs(
                scheme,
                rng,
                clean=clean.select(idx) if clean is not None else None,
                noisy=noisy.select(idx) if noisy is not None else None,
                noise_spec=noise_spec,
            )
        pred = _forward_padded(net, pairs.input.data)
        loss = masked_l2(pred, pairs.target.data, pairs.loss_mask)
        opt.zero_grad(set_to_none=True)
        if not bool(torch.isfinite(loss)):
            logger.warning("denoiser step %d has a non-finite loss; skipped", it)
            history.append({"iteration": it, "loss": float("nan"), "diverged": True})
            sched.step()
            continue
        loss.backward()
        opt.step()
        sched.step()
        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            history.append({"iteration": it + 1, "loss": float(loss), "lr": opt.param_groups[0]["lr"]})
            logger.info("denoiser %s iter %d  loss=%.6f", s.value, it + 1, float(loss))
    return net, history


class ExternalBaseline:
    """Slot for an external denoiser (e.g. a BM3D build) run as a command.

    ``command`` is a template with ``{input}`` and ``{output}``: both are
    ``.npy`` files holding ``[N, H, W, C]`` float32 arrays in the half_unit
    range.
    """

    def __init__(self, command: str, timeout: float = 3600.0):
        if "{input}" not in command or "{output}" not in command:
            raise ConfigurationError("external denoiser command needs {input} and {output}")
        self.command = command
        self.timeout = timeout

    def __call__(self, y: ImageBatch) -> ImageBatch:
        _check_half_unit(y)
        with tempfile.TemporaryDirectory(prefix="nrgan-ext-") as tmp:
            src, dst = Path(tmp) / "input.npy", Path(tmp) / "output.npy"
            np.save(src, y.data.detach().cpu().numpy().astype(np.float32))
            args = shlex.split(self.command.format(input=str(src), output=str(dst)))
            result = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
            if result.returncode != 0:
                raise ConfigurationError(
                    f"external denoiser failed ({result.returncode}): {result.stderr.strip()}"
                )
            out = np.load(dst, allow_pickle=False)
        if out.shape != tuple(y.shape):
            raise ValidationError(f"external denoiser returned shape {out.shape}, expected {tuple(y.shape)}")
        return ImageBatch(torch.from_numpy(out).to(y.data.dtype), ValueRange.HALF_UNIT)
