"""Core value types: pixel ranges, images, probability maps, masks.

Images are plain float32 torch tensors of shape (3, H, W) accompanied by a
ValueRange describing the legal pixel interval. The canonical storage range
is (0, 1); models declare their own expected range and conversion happens at
the model boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

MIN_SIDE = 16


@dataclass(frozen=True)
class ValueRange:
    """Closed pixel-value interval [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"invalid range: hi={self.hi} must exceed lo={self.lo}")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, t: Tensor) -> bool:
        return bool((t >= self.lo).all() and (t <= self.hi).all())

    def to_unit(self, t: Tensor) -> Tensor:
        """Map values from this range into canonical (0, 1)."""
        return (t - self.lo) / self.width

    def from_unit(self, t: Tensor) -> Tensor:
        """Map values from canonical (0, 1) into this range."""
        return t * self.width + self.lo


CANONICAL_RANGE = ValueRange(0.0, 1.0)


def trunc(t: Tensor, rng: ValueRange = CANONICAL_RANGE) -> Tensor:
    """Clamp pixel values back into the legal range, elementwise.

    Values already inside the range pass through unchanged.
    """
    return t.clamp(rng.lo, rng.hi)


def validate_image(t: Tensor, rng: ValueRange = CANONICAL_RANGE) -> Tensor:
    """Check image invariants: shape (3, H, W), H/W >= 16, values in range."""
    if t.dim() != 3 or t.shape[0] != 3:
        raise ValueError(f"image must have shape (3, H, W), got {tuple(t.shape)}")
    if t.shape[1] < MIN_SIDE or t.shape[2] < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {tuple(t.shape[1:])}")
    if not rng.contains(t):
        raise ValueError(
            f"image values outside [{rng.lo}, {rng.hi}]: "
            f"min={t.min().item():.6g} max={t.max().item():.6g}"
        )
    return t


def validate_probability_map(t: Tensor) -> Tensor:
    if t.dim() != 2:
        raise ValueError(f"probability map must be 2-D (H, W), got {tuple(t.shape)}")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("probability map values must lie in [0, 1]")
    return t


def validate_binary_mask(t: Tensor) -> Tensor:
    if t.dim() != 2:
        raise ValueError(f"mask must be 2-D (H, W), got {tuple(t.shape)}")
    if not torch.logical_or(t == 0, t == 1).all():
        raise ValueError("mask entries must be 0 or 1")
    return t
