"""Symmetric fixed-point quantization grid: scale selection, rounding, dequantization.

All arithmetic is done in float64; integer codes are int32 regardless of the
bit width so that grid bounds and error sums never suffer narrow-type
accumulation issues.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MODES = ("e", "ek", "ec", "ekc")


@dataclass(frozen=True)
class QuantGrid:
    """Signed integer grid for a given bit width, e.g. 4 bits -> [-8, 7]."""

    bit_width: int

    def __post_init__(self):
        if not 2 <= self.bit_width <= 8:
            raise ValidationError(f"bit width must be in [2, 8], got {self.bit_width}")

    @property
    def grid_min(self) -> int:
        return -(1 << (self.bit_width - 1))

    @property
    def grid_max(self) -> int:
        return (1 << (self.bit_width - 1)) - 1


@dataclass(frozen=True)
class QuantConfig:
    """Quantization settings.

    mode selects which granularities participate: "e" is plain rounding,
    "ek"/"ec" add kernel-wise / channel-wise flip passes, "ekc" runs both.

    The radii describe the perturbation bounds the result is checked against:
    flipped elements may reach r_e, kernels r_k after the channel pass.  r_c
    additionally drives the channel flip target (flips stop once the absolute
    channel error sum is within r_c).  The kernel pass always flips the
    nearest-integer count of its error sum; only the defaults are validated.
    """

    grid: QuantGrid = field(default_factory=lambda: QuantGrid(4))
    mode: str = "ekc"
    r_e: float = 1.0
    r_k: float = 1.0
    r_c: float = 0.5
    topk_cap_c: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.r_e > 0 and self.r_k > 0 and self.r_c > 0):
            raise ValidationError("relaxation radii must be positive")
        if self.topk_cap_c < 1:
            raise ValidationError("topk_cap_c must be >= 1")

    @property
    def has_kernel_pass(self) -> bool:
        return "k" in self.mode

    @property
    def has_channel_pass(self) -> bool:
        return "c" in self.mode


def compute_scale(channel_weights: np.ndarray, grid: QuantGrid) -> float:
    """Symmetric max-abs scale for one output channel.

    A dead (all-zero) channel gets the sentinel scale 1.0 instead of an error;
    pruned models produce such channels routinely.
    """
    w = np.asarray(channel_weights, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("channel is empty")
    if not np.all(np.isfinite(w)):
        raise ValidationError("channel contains non-finite values")
    peak = float(np.max(np.abs(w)))
    return peak / grid.grid_max if peak > 0.0 else 1.0


def compute_scales(data: np.ndarray, grid: QuantGrid) -> np.ndarray:
    """Per-output-channel max-abs scales for an (M, N, K) weight array."""
    w = np.asarray(data, dtype=np.float64)
    peak = np.max(np.abs(w.reshape(w.shape[0], -1)), axis=1)
    return np.where(peak > 0.0, peak / grid.grid_max, 1.0)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (0.5 -> 1, -0.5 -> -1).

    numpy's round() uses banker's rounding; this policy is fixed so codes are
    identical across platforms.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def round_to_grid(w_scaled, grid: QuantGrid) -> np.ndarray:
    """Round already-scaled weights to integer codes, clipping to the grid."""
    x = np.asarray(w_scaled, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("scaled weights contain non-finite values")
    r = np.clip(round_half_away(x), grid.grid_min, grid.grid_max)
    return r.astype(np.int32)


def dequantize(codes: np.ndarray, scales) -> np.ndarray:
    """Reconstruct real weights as scale * code, one scale per output channel."""
    c = np.asarray(codes)
    s = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if s.ndim != 1 or s.shape[0] != c.shape[0]:
        raise ValidationError(
            f"need one scale per output channel: {s.shape[0]} scales for {c.shape[0]} channels"
        )
    if np.any(s <= 0):
        raise ValidationError("scales must be strictly positive")
    return c.astype(np.float64) * s.reshape((-1,) + (1,) * (c.ndim - 1))
