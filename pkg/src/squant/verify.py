"""Recompute perturbations from a stored artifact and check the flip bounds.

The verifier is independent of the engine's bookkeeping: it rederives scales
from the source weights, recovers each element's perturbation from the stored
codes, identifies mutated elements as those whose code differs from plain
rounding, and checks the bounds the recorded mode promises.  Channels the
report flags as saturated or capped are exempt from their group bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .grid import QuantGrid, compute_scales, round_to_grid
from .model import QuantizedTensor, WeightTensor

DEFAULT_TOL = 1e-9


@dataclass
class Violation:
    tensor: str
    kind: str
    location: tuple
    detail: str

    def __str__(self):
        return f"{self.tensor}: {self.kind} at {self.location}: {self.detail}"


def _first_index(mask: np.ndarray) -> tuple:
    return tuple(int(x) for x in np.argwhere(mask)[0])


def verify_artifact(tensors: list[WeightTensor], artifacts: list[QuantizedTensor],
                    tol: float = DEFAULT_TOL) -> list[Violation]:
    """Check every artifact against its source tensor; returns violations."""
    sources = {t.name: t for t in tensors}
    out: list[Violation] = []
    for art in artifacts:
        src = sources.get(art.name)
        if src is None:
            raise SchemaError(f"artifact tensor {art.name!r} missing from source model")
        if art.shape4 != src.shape4:
            raise SchemaError(
                f"tensor {art.name!r}: artifact shape {art.shape4} != source {src.shape4}"
            )
        out.extend(_verify_tensor(src, art, tol))
    return out


def _verify_tensor(src: WeightTensor, art: QuantizedTensor, tol: float) -> list[Violation]:
    grid = QuantGrid(art.bit_width)
    report = art.report
    mode = report.mode
    violations: list[Violation] = []

    scales = compute_scales(src.data, grid)
    stored32 = art.scales.astype(np.float32)
    expect32 = scales.astype(np.float32)
    if not np.array_equal(stored32, expect32):
        m = int(np.flatnonzero(stored32 != expect32)[0])
        violations.append(Violation(art.name, "scale-mismatch", (m,),
                                    f"stored {stored32[m]!r}, recomputed {expect32[m]!r}"))
        return violations

    scaled = src.data / scales[:, None, None]
    rounded = round_to_grid(scaled, grid)
    delta = art.codes.astype(np.float64) - scaled
    mutated = art.codes != rounded

    step = np.abs(art.codes.astype(np.int64) - rounded.astype(np.int64))
    if np.any(step > 1):
        loc = _first_index(step > 1)
        violations.append(Violation(art.name, "mutation-discipline", loc,
                                    f"code differs from rounding by {int(step[loc])}"))
    if mode == "e" and mutated.any():
        violations.append(Violation(art.name, "unexpected-flip", _first_index(mutated),
                                    "rounding mode must not mutate codes"))

    bad = ~mutated & (np.abs(delta) > 0.5 + tol)
    if bad.any():
        loc = _first_index(bad)
        violations.append(Violation(art.name, "element-bound", loc,
                                    f"unflipped |delta| = {abs(delta[loc]):.12f} > 0.5"))
    bad = mutated & ((np.abs(delta) < 0.5 - tol) | (np.abs(delta) >= 1.0))
    if bad.any():
        loc = _first_index(bad)
        violations.append(Violation(art.name, "flip-bound", loc,
                                    f"flipped |delta| = {abs(delta[loc]):.12f} outside [0.5, 1.0)"))

    flagged = report.flagged_channels()
    kernel_case = np.abs(delta.sum(axis=2))
    channel_case = np.abs(delta.sum(axis=(1, 2)))
    sat_kernels = {tuple(x) for x in report.saturated_kernels}

    if mode in ("ek", "ekc"):
        bound = 0.5 if mode == "ek" else 1.0
        bad = kernel_case > bound + tol
        for m, n in np.argwhere(bad):
            if (int(m), int(n)) in sat_kernels or int(m) in flagged:
                continue
            violations.append(Violation(art.name, "kernel-bound", (int(m), int(n)),
                                        f"kernel CASE {kernel_case[m, n]:.12f} > {bound}"))
            break
    if mode in ("ec", "ekc"):
        bad = channel_case > 0.5 + tol
        for (m,) in np.argwhere(bad):
            if int(m) in flagged:
                continue
            violations.append(Violation(art.name, "channel-bound", (int(m),),
                                        f"channel CASE {channel_case[m]:.12f} > 0.5"))
            break
    return violations
