"""Domain types: weight tensors, quantized tensors, and per-tensor reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

LAYER_KINDS = ("conv", "fc")


@dataclass
class WeightTensor:
    """A layer's real-valued weights in output-channel-major layout.

    data has shape (m, n, k) where k = kh * kw; fully connected layers use
    kh = kw = 1 so each row is an output channel with k = 1.
    """

    name: str
    layer_kind: str
    m: int
    n: int
    kh: int
    kw: int
    data: np.ndarray

    @property
    def k(self) -> int:
        return self.kh * self.kw

    @property
    def shape4(self) -> tuple[int, int, int, int]:
        return (self.m, self.n, self.kh, self.kw)

    def validate(self) -> "WeightTensor":
        if self.layer_kind not in LAYER_KINDS:
            raise ValidationError(f"{self.name}: layer_kind must be one of {LAYER_KINDS}")
        if min(self.m, self.n, self.kh, self.kw) < 1:
            raise ValidationError(f"{self.name}: all shape entries must be >= 1")
        if self.layer_kind == "fc" and self.k != 1:
            raise ValidationError(f"{self.name}: fc layers must have kh = kw = 1")
        if self.data.shape != (self.m, self.n, self.k):
            raise ValidationError(
                f"{self.name}: data shape {self.data.shape} != {(self.m, self.n, self.k)}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValidationError(f"{self.name}: weights contain non-finite values")
        return self


@dataclass
class QuantReport:
    """Bookkeeping from one quantization run, serialized into report.json.

    channel_case holds the residual absolute channel error sum per output
    channel; flagged channels (saturated or top-k capped) are exempt from the
    bound guarantees and listed explicitly.
    """

    mode: str
    bit_width: int
    kernel_flips: int = 0
    channel_flips: int = 0
    flip_backs: int = 0
    channel_case: list[float] = field(default_factory=list)
    max_kernel_case: float = 0.0
    saturated_kernels: list[list[int]] = field(default_factory=list)
    saturated_channels: list[int] = field(default_factory=list)
    capped_channels: list[int] = field(default_factory=list)
    timing_us: int = 0

    def flagged_channels(self) -> set[int]:
        flagged = set(self.saturated_channels) | set(self.capped_channels)
        flagged.update(m for m, _ in self.saturated_kernels)
        return flagged

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "bit_width": self.bit_width,
            "kernel_flips": self.kernel_flips,
            "channel_flips": self.channel_flips,
            "flip_backs": self.flip_backs,
            "channel_case": self.channel_case,
            "max_kernel_case": self.max_kernel_case,
            "saturated_kernels": self.saturated_kernels,
            "saturated_channels": self.saturated_channels,
            "capped_channels": self.capped_channels,
            "timing_us": self.timing_us,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantReport":
        return cls(
            mode=d["mode"],
            bit_width=d["bit_width"],
            kernel_flips=d.get("kernel_flips", 0),
            channel_flips=d.get("channel_flips", 0),
            flip_backs=d.get("flip_backs", 0),
            channel_case=list(d.get("channel_case", [])),
            max_kernel_case=d.get("max_kernel_case", 0.0),
            saturated_kernels=[list(x) for x in d.get("saturated_kernels", [])],
            saturated_channels=list(d.get("saturated_channels", [])),
            capped_channels=list(d.get("capped_channels", [])),
            timing_us=d.get("timing_us", 0),
        )


@dataclass
class QuantizedTensor:
    """Integer codes plus per-output-channel scales for one tensor."""

    name: str
    layer_kind: str
    shape4: tuple[int, int, int, int]
    bit_width: int
    mode: str
    codes: np.ndarray
    scales: np.ndarray
    report: QuantReport

    def validate(self) -> "QuantizedTensor":
        m, n, kh, kw = self.shape4
        if self.codes.shape != (m, n, kh * kw):
            raise ValidationError(
                f"{self.name}: codes shape {self.codes.shape} != {(m, n, kh * kw)}"
            )
        grid_min = -(1 << (self.bit_width - 1))
        grid_max = (1 << (self.bit_width - 1)) - 1
        if self.codes.size and (self.codes.min() < grid_min or self.codes.max() > grid_max):
            raise ValidationError(
                f"{self.name}: codes outside grid [{grid_min}, {grid_max}]"
            )
        if self.scales.shape != (m,):
            raise ValidationError(f"{self.name}: need {m} scales, got {self.scales.shape}")
        if np.any(self.scales <= 0):
            raise ValidationError(f"{self.name}: scales must be strictly positive")
        return self
