"""Shared data containers for images, disparity maps, and masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class StereoPair:
    """Rectified image pair, channels-last float32 in [0, 1]."""

    left: np.ndarray
    right: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"left/right shape mismatch: "
                             f"{self.left.shape} vs {self.right.shape}")
        if self.left.ndim != 3 or self.left.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) images, got {self.left.shape}")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")

    @property
    def shape(self):
        return self.left.shape[:2]


@dataclass
class FeatureMap:
    """Channels-last activation map plus its downsampling factor."""

    data: np.ndarray
    scale: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected (H, W, C) features, got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError("feature map must be non-empty")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer")

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class DisparityMap:
    """Disparity field plus a validity mask (False marks no-data pixels)."""

    data: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        if self.valid.shape != self.data.shape:
            raise ValueError("valid mask shape must match disparity shape")

    @property
    def density(self):
        return float(self.valid.mean())


@dataclass
class ConfidenceMap:
    """Left-right-consistency confidence in [0, 1], defined everywhere."""

    c: np.ndarray

    def __post_init__(self):
        if self.c.min() < 0.0 or self.c.max() > 1.0:
            raise ValueError("confidence values must lie in [0, 1]")


@dataclass
class MaskPair:
    """Exact partition of the image into confident and suspect pixels."""

    valid: np.ndarray
    invalid: np.ndarray = None
    epsilon: float = 0.0

    def __post_init__(self):
        if self.invalid is None:
            self.invalid = ~self.valid
        if not (self.valid ^ self.invalid).all():
            raise ValueError("valid/invalid must partition the image exactly")

    @property
    def density(self):
        return float(self.valid.mean())
