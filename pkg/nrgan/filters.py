"""Fixed low-pass kernels and depthwise filtering of NHWC image tensors.

Used by the Brown-noise samplers and by the discriminator input filters.
All filtering pads by reflection so a constant image stays constant.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .error_handler import ValidationError

__all__ = [
    "binomial_kernel1d",
    "gaussian_kernel1d",
    "gaussian_kernel2d",
    "depthwise_filter",
    "reflect_pad",
]


def binomial_kernel1d(size: int = 3) -> np.ndarray:
    """Normalized binomial taps, e.g. ``[1, 2, 1] / 4`` for ``size=3``."""
    if size < 1:
        raise ValidationError(f"kernel size must be >= 1 (got {size})")
    coeffs = (np.poly1d((0.5, 0.5)) ** (size - 1)).coeffs
    return np.asarray(coeffs, dtype=np.float64).reshape(size)


def gaussian_kernel1d(size: int, std: float | None = None) -> np.ndarray:
    """Normalized sampled Gaussian of odd ``size``; std defaults to ``size / 6``."""
    if size < 1 or size % 2 == 0:
        raise ValidationError(f"Gaussian kernel size must be odd (got {size})")
    if size == 1:
        return np.ones(1, dtype=np.float64)
    std = size / 6.0 if std is None else std
    offsets = np.arange(size, dtype=np.float64) - size // 2
    taps = np.exp(-0.5 * (offsets / std) ** 2)
    return taps / taps.sum()


def gaussian_kernel2d(size: int, std: float | None = None) -> np.ndarray:
    k = gaussian_kernel1d(size, std)
    return np.outer(k, k)


def reflect_pad(x: torch.Tensor, pad_h: int, pad_w: int) -> torch.Tensor:
    """Reflection-pad an NCHW tensor, repeating the reflection for large pads."""
    while pad_h > 0 or pad_w > 0:
        step_h = min(pad_h, x.shape[-2] - 1)
        step_w = min(pad_w, x.shape[-1] - 1)
        if (pad_h and step_h <= 0) or (pad_w and step_w <= 0):
            raise ValidationError("cannot reflection-pad a single-pixel axis")
        x = F.pad(x, (step_w, step_w, step_h, step_h), mode="reflect")
        pad_h -= step_h
        pad_w -= step_w
    return x


def depthwise_filter(x: torch.Tensor, kernel: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Convolve every channel of an NHWC tensor with the same 2-D ``kernel``.

    ``kernel`` may be rectangular (e.g. 3x1 for a vertical-only filter). Output
    has the input's shape.
    """
    if x.ndim != 4:
        raise ValidationError(f"expected [N, H, W, C] tensor (got shape {tuple(x.shape)})")
    kernel = torch.as_tensor(kernel, dtype=x.dtype, device=x.device)
    if kernel.ndim != 2:
        raise ValidationError("kernel must be 2-D")
    k_h, k_w = kernel.shape
    if k_h % 2 == 0 or k_w % 2 == 0:
        raise ValidationError(f"kernel dims must be odd (got {k_h}x{k_w})")
    channels = x.shape[-1]
    nchw = x.permute(0, 3, 1, 2)
    padded = reflect_pad(nchw, k_h // 2, k_w // 2)
    weight = kernel.expand(channels, 1, k_h, k_w)
    out = F.conv2d(padded, weight, groups=channels)
    return out.permute(0, 2, 3, 1)
