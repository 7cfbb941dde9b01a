"""Interface definitions to decouple evaluation from the feature network."""

from __future__ import annotations

from typing import TYPE_CHECKING, Protocol, runtime_checkable

import numpy as np

if TYPE_CHECKING:
    from .noise_zoo import ImageBatch


@runtime_checkable
class FeatureExtractor(Protocol):
    """Deterministic map from images to ``[N, dim]`` feature vectors."""

    fingerprint: str
    dim: int

    def __call__(self, images: "ImageBatch") -> np.ndarray: ...
