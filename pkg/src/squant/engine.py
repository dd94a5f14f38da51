"""Progressive flip quantizer minimizing CASE (constrained absolute sum of error).

Rounding leaves each element's perturbation within +/-0.5 but lets signed
error pile up inside a kernel or an output channel.  The engine repairs that
progressively: a kernel pass flips the top-|perturbation| same-sign elements
of every kernel until the kernel's error sum is within 0.5, then a channel
pass flips at most one element per kernel (the kernel's surviving candidate)
until the channel's error sum is within r_c.  Every flip is a +/-1 code
mutation, so flipped elements end with perturbations in [0.5, 1.0).

Output channels are independent sub-problems; the tensor driver vectorizes
across all kernels of a channel block and optionally spreads blocks over a
thread pool, with results identical to sequential execution.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .grid import QuantConfig, QuantGrid, compute_scales, round_to_grid
from .model import QuantizedTensor, QuantReport, WeightTensor

KERNEL_RADIUS = 0.5  # kernel pass always targets |kernel error sum| <= 0.5


def flip_count(error_sum, radius: float = KERNEL_RADIUS):
    """Number of +/-1 flips needed to bring |error_sum| within radius.

    For radius 0.5 this is round-to-nearest of |error_sum| with ties toward
    zero: at |e| = k + 0.5 both k and k+1 flips land on the bound, and fewer
    flips means a smaller element-wise penalty.
    """
    e = np.abs(np.asarray(error_sum, dtype=np.float64))
    return np.maximum(0, np.ceil(e - radius)).astype(np.int64)


def case_of(perturbations, grouping: str = "kernel") -> np.ndarray:
    """Absolute sum of error per group.

    The last axis indexes elements within a kernel; grouping "kernel" reduces
    it, grouping "channel" additionally reduces the kernel axis.
    """
    p = np.asarray(perturbations, dtype=np.float64)
    if grouping == "kernel":
        return np.abs(p.sum(axis=-1))
    if grouping == "channel":
        axes = (-2, -1) if p.ndim >= 2 else (-1,)
        return np.abs(p.sum(axis=axes))
    raise ValidationError(f"unknown grouping {grouping!r}")


@dataclass
class PerturbationState:
    """Per-channel quantization perturbations and their group sums.

    candidates is filled once update_perturbation has reduced each kernel to
    its single remaining flip option; it stays None straight after rounding.
    """

    delta: np.ndarray  # (N, K), code - w/s
    kernel_sums: np.ndarray  # (N,)
    channel_sum: float
    candidates: list | None = None

    @classmethod
    def from_delta(cls, delta: np.ndarray) -> "PerturbationState":
        delta = np.asarray(delta, dtype=np.float64)
        return cls(delta=delta, kernel_sums=delta.sum(axis=-1), channel_sum=float(delta.sum()))


@dataclass(frozen=True)
class FlipCandidate:
    """The single element of a kernel that the channel pass may still flip.

    index is the flat element index within the kernel, or None for an inert
    kernel (no legal candidate).  value is the perturbation the candidate
    currently carries: for an over-flipped kernel that is the post-flip value
    in [0.5, 1.0) and flipping it moves the code back to its rounded value;
    otherwise it is the rounding perturbation (|value| <= 0.5) and flipping
    moves the code one further step.
    """

    index: int | None
    value: float

    @property
    def inert(self) -> bool:
        return self.index is None or self.value == 0.0


@dataclass
class GroupFlipResult:
    """Outcome of one flip pass over a single group."""

    flipped: tuple[int, ...]  # indices in application (rank) order
    directions: tuple[int, ...]  # +/-1 code mutation per flip
    residual: float  # |group error sum| after the flips
    saturated: bool  # fewer legal candidates than requested flips


def squant_e(channel_weights: np.ndarray, scale: float, grid: QuantGrid):
    """Round one channel: codes plus the resulting perturbation state."""
    w = np.asarray(channel_weights, dtype=np.float64)
    if scale <= 0:
        raise ValidationError("scale must be strictly positive")
    scaled = w / scale
    codes = round_to_grid(scaled, grid)
    return codes, PerturbationState.from_delta(codes - scaled)


def _rank_desc(values: np.ndarray, enabled: np.ndarray) -> np.ndarray:
    # Stable sort on -|value| puts the largest magnitudes first and breaks
    # ties by lowest index; disabled entries sort last via +inf keys.
    key = np.where(enabled, -np.abs(values), np.inf)
    return np.argsort(key, axis=-1, kind="stable")


def squant_flip(codes: np.ndarray, perturbations: np.ndarray, grid: QuantGrid, *,
                accumulated: float | None = None,
                k_override: int | None = None):
    """Flip the top-|perturbation| same-sign entries of one group.

    The flip count is the nearest integer to |accumulated error| (ties toward
    zero), each flip mutating a code by one step against the error's sign.
    accumulated defaults to perturbations.sum(); the channel pass passes the
    channel's true error sum explicitly while offering only the per-kernel
    candidates as flippable entries.  k_override is a test hook forcing a flip
    count.  A flip that would leave the grid is skipped for the next-ranked
    entry; if candidates run out the result is marked saturated.

    Returns (mutated codes, GroupFlipResult).
    """
    codes = np.asarray(codes)
    p = np.asarray(perturbations, dtype=np.float64)
    if codes.shape != p.shape or codes.ndim != 1:
        raise ValidationError("codes and perturbations must be matching 1-D arrays")
    e = float(p.sum()) if accumulated is None else float(accumulated)
    k = int(flip_count(e)) if k_override is None else int(k_override)
    sign_e = float(np.sign(e))

    if k <= 0 or sign_e == 0.0:
        return codes.copy(), GroupFlipResult((), (), abs(e), saturated=k > 0)

    legal = (codes - sign_e >= grid.grid_min) & (codes - sign_e <= grid.grid_max)
    enabled = (p * sign_e > 0) & legal
    order = _rank_desc(p, enabled)
    applied = min(k, int(enabled.sum()))
    flips = tuple(int(i) for i in order[:applied])

    out = codes.copy()
    mutation = -int(sign_e)
    for i in flips:
        out[i] += mutation
    residual = abs(e + mutation * applied)
    return out, GroupFlipResult(flips, (mutation,) * applied, residual, saturated=applied < k)


def update_perturbation(perturbations: np.ndarray, flipped=()) -> FlipCandidate:
    """Reduce a kernel processed by squant_flip to its single flip candidate.

    flipped is the kernel's flip list in rank order.  An over-flipped kernel
    (more flips than its original |error sum|) offers its last flipped element
    for flipping back; otherwise the first still-unflipped same-sign element
    is offered for flipping forward.  Kernels with nothing to offer are inert.
    """
    p = np.asarray(perturbations, dtype=np.float64)
    e = float(p.sum())
    applied = len(flipped)

    if applied > abs(e) and e != 0.0:
        idx = int(flipped[-1])
        return FlipCandidate(idx, float(p[idx] - np.sign(e)))

    if e == 0.0:
        enabled = p != 0.0
    else:
        enabled = p * np.sign(e) > 0
    count = int(enabled.sum())
    if applied >= count:
        return FlipCandidate(None, 0.0)
    order = _rank_desc(p, enabled)
    idx = int(order[applied])
    return FlipCandidate(idx, float(p[idx]))


@dataclass
class FlipRecord:
    """Every code mutation performed on one tensor, in application order.

    Event rows are (m, n, i) element coordinates; kernel-pass events are
    ordered by channel, kernel, then rank, channel-pass events by channel then
    rank.  Within a channel kernel events precede channel events, matching the
    sequential semantics of the progressive algorithm.
    """

    shape: tuple[int, int, int]
    kernel_events: np.ndarray  # (E1, 3) int64
    kernel_mutations: np.ndarray  # (E1,) int64
    channel_events: np.ndarray  # (E2, 3) int64
    channel_mutations: np.ndarray  # (E2,) int64
    kernel_case: np.ndarray  # (M, N) residual |kernel error sum|
    channel_case: np.ndarray  # (M,)
    saturated_kernels: list[tuple[int, int]] = field(default_factory=list)
    saturated_channels: list[int] = field(default_factory=list)
    capped_channels: list[int] = field(default_factory=list)
    flip_backs: int = 0

    def net_mutations(self) -> np.ndarray:
        """Net code mutation per element; nonzero entries form the flip set."""
        net = np.zeros(self.shape, dtype=np.int64)
        for events, muts in ((self.kernel_events, self.kernel_mutations),
                             (self.channel_events, self.channel_mutations)):
            if len(events):
                np.add.at(net, (events[:, 0], events[:, 1], events[:, 2]), muts)
        return net


def _candidate_arrays(delta, order, applied, counts, e, over, kernel_pass_ran):
    """Vectorized update_perturbation over all kernels of a channel block."""
    mb, n, k = delta.shape
    idx = np.zeros((mb, n), dtype=np.int64)
    val = np.zeros((mb, n), dtype=np.float64)
    have = np.zeros((mb, n), dtype=bool)

    if kernel_pass_ran and over.any():
        # last flipped element; delta already holds its post-flip value
        last = np.take_along_axis(order, np.maximum(applied - 1, 0)[:, :, None], axis=2)[:, :, 0]
        v = np.take_along_axis(delta, last[:, :, None], axis=2)[:, :, 0]
        idx[over] = last[over]
        val[over] = v[over]
        have |= over

    under = ~over & (applied < counts)
    if under.any():
        nxt = np.take_along_axis(order, np.minimum(applied, k - 1)[:, :, None], axis=2)[:, :, 0]
        v = np.take_along_axis(delta, nxt[:, :, None], axis=2)[:, :, 0]
        idx[under] = nxt[under]
        val[under] = v[under]
        have |= under

    # e == 0 kernels disabled everything above; offer the largest |delta|
    zero_e = (e == 0.0) & ~have
    if zero_e.any():
        best = np.argmax(np.abs(delta), axis=2)
        v = np.take_along_axis(delta, best[:, :, None], axis=2)[:, :, 0]
        pick = zero_e & (v != 0.0)
        idx[pick] = best[pick]
        val[pick] = v[pick]
        have |= pick

    have &= val != 0.0
    return idx, val, have


def _quantize_block(scaled: np.ndarray, config: QuantConfig):
    """Run all passes on a block of output channels; scaled is (Mb, N, K)."""
    grid = config.grid
    mb, n, k = scaled.shape
    codes = round_to_grid(scaled, grid)
    delta = codes - scaled

    empty = np.zeros((0, 3), dtype=np.int64)
    kernel_events, kernel_muts = empty, np.zeros(0, dtype=np.int64)
    channel_events, channel_muts = empty, np.zeros(0, dtype=np.int64)
    sat_kernels = np.zeros((mb, n), dtype=bool)
    over = np.zeros((mb, n), dtype=bool)
    order = None
    applied = np.zeros((mb, n), dtype=np.int64)
    counts = np.zeros((mb, n), dtype=np.int64)
    flip_backs = 0

    kernel_pass = config.has_kernel_pass and k > 1
    need_candidates = config.has_channel_pass

    if kernel_pass or need_candidates:
        e = delta.sum(axis=2)
        sign_e = np.sign(e)

    if kernel_pass:
        wanted = flip_count(e)
        stepped = codes - sign_e[:, :, None]
        legal = (stepped >= grid.grid_min) & (stepped <= grid.grid_max)
        enabled = (delta * sign_e[:, :, None] > 0) & legal
        order = _rank_desc(delta, enabled)
        counts = enabled.sum(axis=2)
        applied = np.minimum(wanted, counts)
        sat_kernels = applied < wanted

        take = np.arange(k)[None, None, :] < applied[:, :, None]
        flip_mask = np.zeros_like(enabled)
        np.put_along_axis(flip_mask, order, take, axis=2)
        mut = np.where(flip_mask, -sign_e[:, :, None], 0.0)
        codes = codes + mut.astype(np.int32)
        delta = delta + mut

        pos = np.argwhere(take)  # (m, n, rank) in application order
        if len(pos):
            ev_i = order[pos[:, 0], pos[:, 1], pos[:, 2]]
            kernel_events = np.column_stack([pos[:, 0], pos[:, 1], ev_i]).astype(np.int64)
            kernel_muts = (-sign_e[pos[:, 0], pos[:, 1]]).astype(np.int64)
        over = ~sat_kernels & (applied > np.abs(e))
    elif need_candidates:
        # no kernel pass ran (mode "ec", or 1x1 / fc kernels): every kernel
        # still offers its best same-sign element to the channel pass
        enabled = delta * sign_e[:, :, None] > 0
        order = _rank_desc(delta, enabled)
        counts = enabled.sum(axis=2)

    sat_channels = np.zeros(mb, dtype=bool)
    capped = np.zeros(mb, dtype=bool)
    if need_candidates:
        cand_i, cand_v, cand_ok = _candidate_arrays(
            delta, order, applied, counts, e, over, kernel_pass)
        cand_ok &= ~sat_kernels

        s = delta.sum(axis=(1, 2))
        sign_s = np.sign(s)
        wanted_c = flip_count(s, config.r_c)
        capped = wanted_c > config.topk_cap_c
        k_c = np.minimum(wanted_c, config.topk_cap_c)

        flat_pos = np.arange(n)[None, :] * k + cand_i
        cand_code = np.take_along_axis(codes.reshape(mb, -1), flat_pos, axis=1)
        mut_c = -np.sign(cand_v)
        stepped = cand_code + mut_c
        legal_c = (stepped >= grid.grid_min) & (stepped <= grid.grid_max)
        enabled_c = cand_ok & legal_c & (cand_v * sign_s[:, None] > 0)

        order_c = _rank_desc(cand_v, enabled_c)
        counts_c = enabled_c.sum(axis=1)
        applied_c = np.minimum(k_c, counts_c)
        sat_channels = applied_c < k_c

        take_c = np.arange(n)[None, :] < applied_c[:, None]
        pos = np.argwhere(take_c)  # (m, rank) in application order
        if len(pos):
            m_idx = pos[:, 0]
            n_star = order_c[m_idx, pos[:, 1]]
            i_star = cand_i[m_idx, n_star]
            muts = mut_c[m_idx, n_star].astype(np.int64)
            codes[m_idx, n_star, i_star] += muts.astype(np.int32)
            delta[m_idx, n_star, i_star] += muts
            channel_events = np.column_stack([m_idx, n_star, i_star]).astype(np.int64)
            channel_muts = muts
            flip_backs = int(over[m_idx, n_star].sum())

    record = FlipRecord(
        shape=(mb, n, k),
        kernel_events=kernel_events,
        kernel_mutations=kernel_muts,
        channel_events=channel_events,
        channel_mutations=channel_muts,
        kernel_case=np.abs(delta.sum(axis=2)),
        channel_case=np.abs(delta.sum(axis=(1, 2))),
        saturated_kernels=[(int(a), int(b)) for a, b in np.argwhere(sat_kernels)],
        saturated_channels=[int(i) for i in np.flatnonzero(sat_channels)],
        capped_channels=[int(i) for i in np.flatnonzero(capped)],
        flip_backs=flip_backs,
    )
    return codes, delta, record


def _merge_records(parts: list[tuple[int, FlipRecord]], shape) -> FlipRecord:
    def shift(events, offset):
        if not len(events):
            return events
        out = events.copy()
        out[:, 0] += offset
        return out

    merged = FlipRecord(
        shape=shape,
        kernel_events=np.concatenate([shift(r.kernel_events, off) for off, r in parts]),
        kernel_mutations=np.concatenate([r.kernel_mutations for _, r in parts]),
        channel_events=np.concatenate([shift(r.channel_events, off) for off, r in parts]),
        channel_mutations=np.concatenate([r.channel_mutations for _, r in parts]),
        kernel_case=np.concatenate([r.kernel_case for _, r in parts], axis=0),
        channel_case=np.concatenate([r.channel_case for _, r in parts]),
        flip_backs=sum(r.flip_backs for _, r in parts),
    )
    for off, r in parts:
        merged.saturated_kernels += [(m + off, n) for m, n in r.saturated_kernels]
        merged.saturated_channels += [m + off for m in r.saturated_channels]
        merged.capped_channels += [m + off for m in r.capped_channels]
    return merged


def squant_tensor(tensor: WeightTensor, config: QuantConfig,
                  workers: int | None = None):
    """Quantize one weight tensor; returns (QuantizedTensor, FlipRecord).

    Mode "e" is plain per-channel rounding; "ek"/"ec"/"ekc" add the flip
    passes.  Fully connected and 1x1 kernels skip the kernel pass (a
    one-element kernel has nothing to rebalance).  Channels are processed
    independently, so workers > 1 splits them over a thread pool with results
    identical to the sequential run.
    """
    tensor.validate()
    start = time.perf_counter_ns()
    grid = config.grid
    scales = compute_scales(tensor.data, grid)
    scaled = tensor.data / scales[:, None, None]

    if workers and workers > 1 and tensor.m > 1:
        blocks = np.array_split(np.arange(tensor.m), min(workers, tensor.m))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda idx: _quantize_block(scaled[idx[0]:idx[-1] + 1], config),
                blocks))
        codes = np.concatenate([r[0] for r in results], axis=0)
        record = _merge_records(
            [(int(b[0]), r[2]) for b, r in zip(blocks, results)],
            (tensor.m, tensor.n, tensor.k))
    else:
        codes, _, record = _quantize_block(scaled, config)

    elapsed_us = (time.perf_counter_ns() - start) // 1000
    report = QuantReport(
        mode=config.mode,
        bit_width=grid.bit_width,
        kernel_flips=int(len(record.kernel_events)),
        channel_flips=int(len(record.channel_events)),
        flip_backs=record.flip_backs,
        channel_case=[float(x) for x in record.channel_case],
        max_kernel_case=float(record.kernel_case.max()) if record.kernel_case.size else 0.0,
        saturated_kernels=[[m, n] for m, n in record.saturated_kernels],
        saturated_channels=list(record.saturated_channels),
        capped_channels=list(record.capped_channels),
        timing_us=int(elapsed_us),
    )
    quantized = QuantizedTensor(
        name=tensor.name,
        layer_kind=tensor.layer_kind,
        shape4=tensor.shape4,
        bit_width=grid.bit_width,
        mode=config.mode,
        codes=codes,
        scales=scales,
        report=report,
    )
    return quantized, record


def quantize_model(tensors: list[WeightTensor], config: QuantConfig,
                   workers: int | None = None) -> list[QuantizedTensor]:
    """Quantize every tensor of a model under one configuration."""
    return [squant_tensor(t, config, workers=workers)[0] for t in tensors]
