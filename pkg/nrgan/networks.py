"""ResNet generator and discriminator used by every GAN variant.

Blocks are pre-activation (ReLU -> conv -> ReLU -> conv) with nearest-neighbour
upsampling in the generator and average-pool downsampling in the
discriminator. The residual branch is scaled by 0.1 and there is no batch
normalization. Tensors are NHWC at the module boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .error_handler import ValidationError

logger = logging.getLogger(__name__)

RESIDUAL_SCALE = 0.1
BLOCK_STYLE = "preact-nearest-avgpool"
HEADS = ("image", "sigma", "noise")


@dataclass(frozen=True)
class ArchPreset:
    """Widths for one scale. ``g_widths`` has one entry per up block."""

    name: str
    image_size: int
    z_dim: int
    base_width: int
    g_widths: Tuple[int, ...]
    d_down_widths: Tuple[int, ...]
    d_plain_widths: Tuple[int, ...]


PRESETS: Dict[str, ArchPreset] = {
    "tiny": ArchPreset("tiny", 8, 128, 32, (32,), (32,), (32,)),
    "small": ArchPreset("small", 32, 128, 128, (128, 128, 128), (128, 128), (128, 128)),
    "large": ArchPreset(
        "large",
        128,
        256,
        1024,
        (1024, 512, 256, 128, 64),
        (64, 128, 256, 512, 1024),
        (1024,),
    ),
}


def get_preset(name: str) -> ArchPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(
            f"unknown architecture preset '{name}' (choose from {sorted(PRESETS)})"
        ) from None


class ResBlock(nn.Module):
    """Pre-activation residual block, optionally resampling by a factor of 2."""

    def __init__(self, in_ch: int, out_ch: int, resample: str | None = None, first: bool = False):
        super().__init__()
        if resample not in (None, "up", "down"):
            raise ValidationError(f"unknown resample mode {resample!r}")
        self.resample = resample
        self.first = first
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = (
            nn.Conv2d(in_ch, out_ch, 1)
            if in_ch != out_ch or resample is not None
            else nn.Identity()
        )

    def _resample(self, h: torch.Tensor) -> torch.Tensor:
        if self.resample == "up":
            return F.interpolate(h, scale_factor=2, mode="nearest")
        if self.resample == "down":
            return F.avg_pool2d(h, 2)
        return h

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x if self.first else F.relu(x)
        if self.resample == "up":
            h = self._resample(h)
        h = self.conv1(h)
        h = self.conv2(F.relu(h))
        if self.resample == "down":
            h = self._resample(h)

        if self.resample == "up":
            skip = self.shortcut(self._resample(x))
        else:
            skip = self._resample(self.shortcut(x))
        return skip + RESIDUAL_SCALE * h


class ResNetGenerator(nn.Module):
    """``z -> [N, H, W, C]`` generator.

    ``head`` selects the output map: ``image`` and ``noise`` end in tanh,
    ``sigma`` maps tanh output ``t`` to ``sigma_max * (t + 1) / 2`` so it is
    nonnegative.
    """

    def __init__(
        self,
        preset: ArchPreset | str,
        out_channels: int = 3,
        z_dim: int | None = None,
        head: str = "image",
        sigma_max: float = 1.0,
    ):
        super().__init__()
        preset = get_preset(preset) if isinstance(preset, str) else preset
        if head not in HEADS:
            raise ValidationError(f"unknown generator head '{head}'")
        if sigma_max <= 0:
            raise ValidationError(f"sigma_max must be > 0 (got {sigma_max})")
        self.preset = preset
        self.head = head
        self.sigma_max = float(sigma_max)
        self.z_dim = int(z_dim or preset.z_dim)
        self.out_channels = out_channels

        base = preset.base_width
        self.linear = nn.Linear(self.z_dim, 4 * 4 * base)
        blocks = []
        in_ch = base
        for width in preset.g_widths:
            blocks.append(ResBlock(in_ch, width, resample="up"))
            in_ch = width
        self.blocks = nn.Sequential(*blocks)
        self.to_rgb = nn.Conv2d(in_ch, out_channels, 3, padding=1)

    @property
    def image_size(self) -> int:
        return 4 * 2 ** len(self.preset.g_widths)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise ValidationError(
                f"expected latent of shape [N, {self.z_dim}] (got {tuple(z.shape)})"
            )
        h = self.linear(z).view(z.shape[0], self.preset.base_width, 4, 4)
        h = self.blocks(h)
        h = torch.tanh(self.to_rgb(F.relu(h)))
        if self.head == "sigma":
            h = self.sigma_max * (h + 1.0) * 0.5
        return h.permute(0, 2, 3, 1)


class ResNetDiscriminator(nn.Module):
    """``[N, H, W, C_in] -> [N]`` logits. ``C_in`` is 2C behind a blurvh filter."""

    def __init__(self, preset: ArchPreset | str, in_channels: int = 3):
        super().__init__()
        preset = get_preset(preset) if isinstance(preset, str) else preset
        self.preset = preset
        self.in_channels = in_channels
        blocks = []
        in_ch = in_channels
        for i, width in enumerate(preset.d_down_widths):
            blocks.append(ResBlock(in_ch, width, resample="down", first=(i == 0)))
            in_ch = width
        for width in preset.d_plain_widths:
            blocks.append(ResBlock(in_ch, width))
            in_ch = width
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(in_ch, 1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4 or y.shape[-1] != self.in_channels:
            raise ValidationError(
                f"discriminator expects [N, H, W, {self.in_channels}] "
                f"(got {tuple(y.shape)})"
            )
        h = self.blocks(y.permute(0, 3, 1, 2))
        h = F.relu(h).mean(dim=(2, 3))
        return self.fc(h).squeeze(1)
