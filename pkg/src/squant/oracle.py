"""Independent verification machinery for the flip engine.

Three tools, deliberately kept free of engine internals so they can serve as
oracles: an exhaustive minimizer of the data-free objective over the +/-1
rounding neighborhood, a decomposition of a channel Gram matrix into strictly
positive element/kernel/channel coefficients, and an approximation-precision
metric that replays the engine's flips against the coefficient-weighted
objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import squant_tensor
from .errors import GramDegeneracyError, ValidationError
from .grid import QuantConfig, QuantGrid, compute_scales, round_to_grid
from .model import WeightTensor

BRUTE_FORCE_LIMIT = 20  # search space is 3**(N*K)
FULL_GRID_LIMIT = 6
KERNEL_CASE_BOUND = 0.5
RELAXED_KERNEL_BOUND = 1.0
CHANNEL_CASE_BOUND = 0.5
_CONSTRAINT_EPS = 1e-9
_CHUNK = 3 ** 12


@dataclass
class GramDecomposition:
    """Positive coefficients splitting a Gram matrix into E + K + C parts.

    c_coeff covers the whole channel block, k_coeffs[n] the n-th kernel's
    diagonal block, and e_coeffs[n, i] the per-element diagonal remainders.
    """

    e_coeffs: np.ndarray  # (N, K)
    k_coeffs: np.ndarray  # (N,)
    c_coeff: float
    epsilon: float
    epsilon_prime: float

    @classmethod
    def uniform(cls, n: int, k: int) -> "GramDecomposition":
        """All-ones coefficients; the weighted objective then equals the
        data-free one exactly."""
        return cls(np.ones((n, k)), np.ones(n), 1.0, 0.0, 0.0)

    def reconstruct(self) -> np.ndarray:
        """Build the approximated (NK, NK) matrix: diagonal e + block k + c."""
        n, k = self.e_coeffs.shape
        out = np.full((n * k, n * k), self.c_coeff, dtype=np.float64)
        for j in range(n):
            sl = slice(j * k, (j + 1) * k)
            out[sl, sl] += self.k_coeffs[j]
        out[np.diag_indices(n * k)] += self.e_coeffs.reshape(-1)
        return out


@dataclass
class ObjectiveBreakdown:
    element_term: float
    kernel_term: float
    channel_term: float

    @property
    def total(self) -> float:
        return self.element_term + self.kernel_term + self.channel_term


def decompose_gram(gram: np.ndarray, n: int, k: int,
                   epsilon: float = 0.1, epsilon_prime: float = 0.1) -> GramDecomposition:
    """Split an (NK, NK) Gram matrix into strictly positive e/k/c coefficients.

    The channel coefficient takes (1 - epsilon) of the smallest absolute
    entry, each kernel block then takes (1 - epsilon_prime) of what its own
    minimum has left, and the per-element coefficients absorb the remaining
    diagonal.  A zero entry anywhere makes a positive channel coefficient
    impossible and raises GramDegeneracyError.
    """
    h = np.asarray(gram, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] != n * k:
        raise ValidationError(f"gram must be ({n * k}, {n * k}), got {h.shape}")
    if not np.allclose(h, h.T, rtol=1e-10, atol=0.0):
        raise ValidationError("gram matrix must be symmetric")
    if not (0 < epsilon < 1 and 0 < epsilon_prime < 1):
        raise ValidationError("epsilon and epsilon_prime must lie in (0, 1)")

    habs = np.abs(h)
    if np.any(habs == 0.0):
        i, j = np.argwhere(habs == 0.0)[0]
        raise GramDegeneracyError(
            f"gram entry ({i}, {j}) is zero; cannot extract a positive channel coefficient"
        )
    c = (1.0 - epsilon) * float(habs.min())

    k_coeffs = np.empty(n, dtype=np.float64)
    e_coeffs = np.empty((n, k), dtype=np.float64)
    for j in range(n):
        block = habs[j * k:(j + 1) * k, j * k:(j + 1) * k]
        k_coeffs[j] = (1.0 - epsilon_prime) * float((block - c).min())
        e_coeffs[j] = np.diag(block) - c - k_coeffs[j]

    if c <= 0 or np.any(k_coeffs <= 0) or np.any(e_coeffs <= 0):
        raise GramDegeneracyError("decomposition produced a non-positive coefficient")
    return GramDecomposition(e_coeffs, k_coeffs, c, epsilon, epsilon_prime)


def synthetic_gram(n: int, k: int, rng: np.random.Generator,
                   draws: int = 100, mean: float = 1.0, std: float = 0.25) -> np.ndarray:
    """Average of outer products of positive-mean random vectors.

    Stand-in for a second-moment matrix of real activations: the positive
    mean keeps every entry positive with overwhelming probability, so the
    decomposition succeeds.
    """
    x = rng.normal(mean, std, size=(draws, n * k))
    return (x.T @ x) / draws


def eval_precise_objective(delta: np.ndarray, dec: GramDecomposition) -> ObjectiveBreakdown:
    """Coefficient-weighted quadratic error of one channel's perturbations."""
    d = np.asarray(delta, dtype=np.float64)
    if d.shape != dec.e_coeffs.shape:
        raise ValidationError(f"delta shape {d.shape} != coefficients {dec.e_coeffs.shape}")
    kernel_sums = d.sum(axis=1)
    return ObjectiveBreakdown(
        element_term=float((dec.e_coeffs * d * d).sum()),
        kernel_term=float((dec.k_coeffs * kernel_sums * kernel_sums).sum()),
        channel_term=float(dec.c_coeff * d.sum() ** 2),
    )


def uniform_objective_ek(delta: np.ndarray) -> float:
    """Element plus kernel terms of the data-free objective, per kernel."""
    d = np.asarray(delta, dtype=np.float64)
    sums = d.sum(axis=-1)
    return float(((d * d).sum(axis=-1) + sums * sums).sum())


def uniform_objective_full(delta: np.ndarray) -> float:
    """All three terms of the data-free objective for one channel."""
    return uniform_objective_ek(delta) + float(np.asarray(delta).sum() ** 2)


def _iter_mutation_chunks(width: int, base: int = 3, chunk: int = _CHUNK):
    total = base ** width
    powers = base ** np.arange(width, dtype=np.int64)
    for lo in range(0, total, chunk):
        ids = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        yield (ids[:, None] // powers[None, :]) % base


def _min_kernel_ek(w: np.ndarray, rounded: np.ndarray, grid: QuantGrid):
    """Exhaustive constrained minimum for one kernel: element + kernel terms
    over codes within +/-1 of rounding, subject to |error sum| <= 0.5."""
    best_val, best_codes = np.inf, None
    for digits in _iter_mutation_chunks(w.size):
        codes = rounded[None, :] + (digits - 1)
        legal = ((codes >= grid.grid_min) & (codes <= grid.grid_max)).all(axis=1)
        p = codes - w[None, :]
        sums = p.sum(axis=1)
        feasible = legal & (np.abs(sums) <= KERNEL_CASE_BOUND + _CONSTRAINT_EPS)
        if not feasible.any():
            continue
        vals = np.where(feasible, (p * p).sum(axis=1) + sums * sums, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_codes = float(vals[j]), codes[j].copy()
    return best_val, best_codes


def brute_force_min(scaled_channel: np.ndarray, grid: QuantGrid,
                    objective: str = "element_kernel"):
    """Global constrained minimum of the data-free objective for one channel.

    scaled_channel is an (N, K) array of already-scaled weights.  Codes range
    over the +/-1 neighborhood of rounding (clip-legal only).  "element_kernel"
    minimizes element + kernel terms subject to every kernel's |error sum|
    <= 0.5; the kernels decouple, so each is enumerated exhaustively on its
    own.  "full" adds the channel term and enumerates all 3**(N*K)
    assignments under the relaxed kernel bound 1.0 and channel bound 0.5.

    Returns (codes, value) with a deterministic argmin (first in enumeration
    order among ties).
    """
    w = np.asarray(scaled_channel, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError("scaled_channel must be 2-D (kernels x elements)")
    n, k = w.shape
    if n * k > BRUTE_FORCE_LIMIT:
        raise ValidationError(
            f"search space 3**{n * k} exceeds the brute-force bound N*K <= {BRUTE_FORCE_LIMIT}"
        )
    rounded = round_to_grid(w, grid)

    if objective == "element_kernel":
        total = 0.0
        codes = np.empty_like(rounded)
        for j in range(n):
            val, best = _min_kernel_ek(w[j], rounded[j], grid)
            if best is None:
                raise ValidationError(f"kernel {j}: no clip-legal assignment meets the bound")
            total += val
            codes[j] = best
        return codes, total

    if objective == "full":
        best_val, best_codes = np.inf, None
        for digits in _iter_mutation_chunks(n * k):
            codes = rounded.reshape(-1)[None, :] + (digits - 1)
            legal = ((codes >= grid.grid_min) & (codes <= grid.grid_max)).all(axis=1)
            p = (codes - w.reshape(-1)[None, :]).reshape(-1, n, k)
            kernel_sums = p.sum(axis=2)
            chan_sums = kernel_sums.sum(axis=1)
            feasible = (legal
                        & (np.abs(kernel_sums) <= RELAXED_KERNEL_BOUND + _CONSTRAINT_EPS).all(axis=1)
                        & (np.abs(chan_sums) <= CHANNEL_CASE_BOUND + _CONSTRAINT_EPS))
            if not feasible.any():
                continue
            vals = ((p * p).sum(axis=(1, 2))
                    + (kernel_sums * kernel_sums).sum(axis=1)
                    + chan_sums * chan_sums)
            vals = np.where(feasible, vals, np.inf)
            j = int(np.argmin(vals))
            if vals[j] < best_val:
                best_val, best_codes = float(vals[j]), codes[j].reshape(n, k).copy()
        if best_codes is None:
            raise ValidationError("no clip-legal assignment meets the bounds")
        return best_codes, best_val

    raise ValidationError(f"unknown objective {objective!r}")


def brute_force_min_full_grid(scaled_kernel: np.ndarray, grid: QuantGrid):
    """Stronger single-kernel check: enumerate the whole integer grid.

    Confirms that restricting the search to the +/-1 rounding neighborhood
    loses nothing: larger mutations only grow the element term faster than
    the kernel term can shrink.
    """
    w = np.asarray(scaled_kernel, dtype=np.float64).reshape(-1)
    if w.size > FULL_GRID_LIMIT:
        raise ValidationError(f"full-grid search limited to kernels of <= {FULL_GRID_LIMIT}")
    levels = grid.grid_max - grid.grid_min + 1
    best_val, best_codes = np.inf, None
    for digits in _iter_mutation_chunks(w.size, base=levels):
        codes = digits + grid.grid_min
        p = codes - w[None, :]
        sums = p.sum(axis=1)
        feasible = np.abs(sums) <= KERNEL_CASE_BOUND + _CONSTRAINT_EPS
        if not feasible.any():
            continue
        vals = np.where(feasible, (p * p).sum(axis=1) + sums * sums, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_codes = float(vals[j]), codes[j].copy()
    if best_codes is None:
        raise ValidationError("no assignment meets the kernel bound")
    return best_codes, best_val


def approximation_precision(tensor: WeightTensor, config: QuantConfig,
                            dec: GramDecomposition) -> float:
    """Fraction of the final pass's flips that decrease the weighted objective.

    The engine chooses flips using only the uniform (coefficient-free)
    objective; this replays them in application order, earlier flips applied,
    and counts a flip correct when it strictly decreases the coefficient-
    weighted objective.  The flips scored are those of the mode's final
    granularity (kernel pass for "ek", channel pass for "ec"/"ekc"); a run
    with no such flips is vacuously precise.
    """
    if dec.e_coeffs.shape != (tensor.n, tensor.k):
        raise ValidationError(
            f"decomposition shaped {dec.e_coeffs.shape} does not match tensor "
            f"({tensor.n}, {tensor.k})"
        )
    _, record = squant_tensor(tensor, config)
    if config.has_channel_pass:
        scored_stage = "channel"
    elif config.has_kernel_pass:
        scored_stage = "kernel"
    else:
        return 1.0

    scales = compute_scales(tensor.data, config.grid)
    scaled = tensor.data / scales[:, None, None]
    delta0 = round_to_grid(scaled, config.grid) - scaled

    ec, kc, cc = dec.e_coeffs, dec.k_coeffs, dec.c_coeff
    flipped = 0
    correct = 0
    for m in range(tensor.m):
        delta = delta0[m].copy()
        kernel_sums = delta.sum(axis=1)
        chan_sum = float(delta.sum())
        for stage, events, muts in (("kernel", record.kernel_events, record.kernel_mutations),
                                    ("channel", record.channel_events, record.channel_mutations)):
            sel = np.flatnonzero(events[:, 0] == m) if len(events) else []
            for row in sel:
                n_i, i, mu = int(events[row, 1]), int(events[row, 2]), float(muts[row])
                d_old = delta[n_i, i]
                e_old = kernel_sums[n_i]
                d_new, e_new, s_new = d_old + mu, e_old + mu, chan_sum + mu
                change = (ec[n_i, i] * (d_new * d_new - d_old * d_old)
                          + kc[n_i] * (e_new * e_new - e_old * e_old)
                          + cc * (s_new * s_new - chan_sum * chan_sum))
                if stage == scored_stage:
                    flipped += 1
                    correct += int(change < 0)
                delta[n_i, i] = d_new
                kernel_sums[n_i] = e_new
                chan_sum = s_new

    return correct / flipped if flipped else 1.0
