"""Acceptance gate: one test per release criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they complete.  Every tolerance is fixed here; nothing is calibrated
at runtime.
"""

import json
import time

import numpy as np
import pytest

from squant import (QuantConfig, QuantGrid, WeightTensor, brute_force_min, decompose_gram,
                    flip_count, load_artifact, load_model, make_random_model, quantize_model,
                    resnet18_layer_shapes, round_to_grid, squant_flip, squant_tensor,
                    store_artifact, store_model, synthetic_gram, uniform_objective_ek,
                    approximation_precision, evaluate_modes)
from squant.cli import main as cli_main
from squant.grid import compute_scales
from squant.reference import LayerSpec, SyntheticModelSpec

GRID = QuantGrid(4)
TOL = 1e-9


def report_line(ok: bool, number: int, text: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
    print(line)
    return line


def random_tensor(rng):
    m = int(rng.integers(1, 17))
    n = int(rng.integers(1, 17))
    kh = int(rng.choice([1, 3, 5]))
    return WeightTensor("t", "conv", m, n, kh, kh,
                        rng.normal(size=(m, n, kh * kh)))


def test_criterion_1_case_bounds():
    """Kernel/channel/element perturbation bounds over 1000 random tensors."""
    start = time.perf_counter()
    violations = 0
    checked = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        tensor = random_tensor(rng)
        scales = compute_scales(tensor.data, GRID)
        scaled = tensor.data / scales[:, None, None]
        rounded = round_to_grid(scaled, GRID)
        for mode in ("ekc", "ek"):
            q, record = squant_tensor(tensor, QuantConfig(grid=GRID, mode=mode))
            delta = q.codes - scaled
            flagged = q.report.flagged_channels()
            sat_kernels = {tuple(x) for x in q.report.saturated_kernels}
            kernel_case = np.abs(delta.sum(axis=2))
            kernel_ok = np.ones_like(kernel_case, dtype=bool)
            for m, n in sat_kernels:
                kernel_ok[m, n] = False
            for m in flagged:
                kernel_ok[m, :] = False
            bound = 1.0 if mode == "ekc" else 0.5
            if np.any(kernel_case[kernel_ok] > bound + TOL):
                violations += 1
            if mode == "ekc":
                channel_case = np.abs(delta.sum(axis=(1, 2)))
                chan_ok = np.array([m not in flagged for m in range(tensor.m)])
                if np.any(channel_case[chan_ok] > 0.5 + TOL):
                    violations += 1
                flipped = q.codes != rounded
                if np.any(np.abs(delta[~flipped]) > 0.5 + TOL):
                    violations += 1
                band = np.abs(delta[flipped])
                if flipped.any() and (band.min() < 0.5 - TOL or band.max() >= 1.0):
                    violations += 1
            checked += 1
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 30.0
    line = report_line(ok, 1, f"CASE bounds on {checked} runs, "
                              f"{violations} violations, {elapsed:.1f}s (< 30s)")
    assert ok, line


def test_criterion_2_oracle_equivalence():
    """Engine EK objective equals the constrained brute-force minimum, 1000/1000."""
    start = time.perf_counter()
    equal = 0
    total = 1000
    for seed in range(total):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        data = rng.normal(size=(1, n, k))
        tensor = WeightTensor("t", "conv", 1, n, 1, k, data)
        q, _ = squant_tensor(tensor, QuantConfig(grid=GRID, mode="ek"))
        scaled = data[0] / compute_scales(data, GRID)[0]
        engine_value = uniform_objective_ek(q.codes[0] - scaled)
        _, oracle_value = brute_force_min(scaled, GRID, "element_kernel")
        if abs(engine_value - oracle_value) <= 1e-12 * max(1.0, abs(oracle_value)):
            equal += 1
    elapsed = time.perf_counter() - start
    ok = equal == total and elapsed < 120.0
    line = report_line(ok, 2, f"objective equality {equal}/{total}, {elapsed:.1f}s (< 2min)")
    assert ok, line


def test_criterion_3_flip_count_law():
    """Per kernel: flips == nearest-integer error sum; k +/- 1 breaks the bound."""
    law_ok = 0
    law_total = 0
    off_ok = 0
    off_total = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        data = rng.normal(size=(1, n, k))
        scaled = data[0] / compute_scales(data, GRID)[0]
        for j in range(n):
            codes = round_to_grid(scaled[j], GRID)
            p = codes - scaled[j]
            expected = int(flip_count(p.sum()))
            _, result = squant_flip(codes, p, GRID)
            law_total += 1
            law_ok += len(result.flipped) == expected and not result.saturated
            for k_off in (expected - 1, expected + 1):
                if k_off < 0:
                    continue
                _, forced = squant_flip(codes, p, GRID, k_override=k_off)
                if forced.saturated:
                    continue
                off_total += 1
                off_ok += forced.residual > 0.5
    ok = law_ok == law_total and off_ok == off_total
    line = report_line(ok, 3, f"flip-count law {law_ok}/{law_total}, "
                              f"off-by-one breaks bound {off_ok}/{off_total}")
    assert ok, line


def test_criterion_4_decomposition_validity():
    """100 synthetic Grams decompose into strictly positive coefficients."""
    good = 0
    total = 100
    for seed in range(total):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        k = int(rng.integers(1, 10))
        gram = synthetic_gram(n, k, rng)
        dec = decompose_gram(gram, n, k)
        positive = dec.c_coeff > 0 and np.all(dec.k_coeffs > 0) and np.all(dec.e_coeffs > 0)
        recon = np.diag(dec.reconstruct())
        diag_ok = np.allclose(recon, np.diag(gram), rtol=1e-12, atol=0.0)
        good += positive and diag_ok
    ok = good == total
    line = report_line(ok, 4, f"positive decomposition with exact diagonal {good}/{total}")
    assert ok, line


def test_criterion_5_approximation_precision():
    """Mean approximation precision >= 0.90 on 100 synthetic-Gram tensors."""
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    values = []
    for _ in range(100):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(2, 5))
        k = int(rng.choice([4, 9]))
        kh, kw = (2, 2) if k == 4 else (3, 3)
        tensor = WeightTensor("t", "conv", m, n, kh, kw, rng.normal(size=(m, n, k)))
        dec = decompose_gram(synthetic_gram(n, k, rng), n, k)
        values.append(approximation_precision(tensor, QuantConfig(grid=GRID, mode="ekc"), dec))
    mean_ap = float(np.mean(values))
    elapsed = time.perf_counter() - start
    ok = mean_ap >= 0.90 and elapsed < 120.0
    line = report_line(ok, 5, f"mean approximation precision {mean_ap:.4f} "
                              f"(>= 0.90) over 100 tensors, {elapsed:.1f}s (< 2min)")
    assert ok, line


def ablation_spec(seed):
    return SyntheticModelSpec(
        seed=seed,
        layers=[LayerSpec("conv", 16, 32, 3, 3, sigma=1.0),
                LayerSpec("conv", 64, 16, 3, 3, sigma=1.0)],
        input_hw=(12, 12),
        input_mean=2.0,
        input_channel_std=1.0,
    )


def test_criterion_6_ablation_ordering():
    """End-to-end MSE improves with granularity in >= 90% of 20 seeds."""
    start = time.perf_counter()
    chain_ek = 0
    chain_ec = 0
    seeds = 20
    for seed in range(seeds):
        result = evaluate_modes(ablation_spec(seed), 4, 256, ["e", "ek", "ec", "ekc"])
        e, ek, ec, ekc = (result.modes[m]["end_to_end_mse"] for m in ("e", "ek", "ec", "ekc"))
        chain_ek += ekc <= ek <= e
        chain_ec += ekc <= ec <= e
    elapsed = time.perf_counter() - start
    ok = chain_ek >= 18 and chain_ec >= 18 and elapsed < 300.0
    line = report_line(ok, 6, f"EKC<=EK<=E in {chain_ek}/{seeds}, EKC<=EC<=E in "
                              f"{chain_ec}/{seeds} (>= 18 each), {elapsed:.0f}s (< 5min)")
    assert ok, line


def test_criterion_7_throughput():
    """ResNet18-shaped set quantizes fast; time scales linearly in channels."""
    tensors = make_random_model(resnet18_layer_shapes(), seed=0)
    config = QuantConfig(grid=GRID, mode="ekc")
    squant_tensor(tensors[2], config)  # warm-up

    start = time.perf_counter()
    single = [squant_tensor(t, config)[0] for t in tensors]
    t_single = time.perf_counter() - start

    start = time.perf_counter()
    parallel = [squant_tensor(t, config, workers=4)[0] for t in tensors]
    t_parallel = time.perf_counter() - start
    identical = all(np.array_equal(a.codes, b.codes) for a, b in zip(single, parallel))

    def median_time(m, reps=5):
        rng = np.random.default_rng(1)
        t = WeightTensor("t", "conv", m, 64, 3, 3, rng.normal(size=(m, 64, 9)))
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            squant_tensor(t, config)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    ratio = median_time(512) / median_time(256)

    # every unflagged channel of the full 21-layer set lands within the bound
    cases_ok = all(
        case <= 0.5 + TOL
        for art in single
        for m, case in enumerate(art.report.channel_case)
        if m not in art.report.flagged_channels()
    )

    ok = (t_single < 5.0 and t_parallel < 2.0 and identical
          and ratio <= 3.0 and cases_ok)
    line = report_line(ok, 7, f"single {t_single:.2f}s (< 5s), parallel {t_parallel:.2f}s "
                              f"(< 2s), identical codes {identical}, 2x-channels time "
                              f"ratio {ratio:.2f} (<= 3.0), unflagged CASE ok {cases_ok}")
    assert ok, line


def test_criterion_8_round_trip_and_determinism(tmp_path):
    """Bit-exact storage, identical re-runs, and verification exit code 0."""
    tensors = make_random_model(resnet18_layer_shapes()[:6], seed=3)
    store_model(tmp_path / "model", tensors)
    rc1 = cli_main(["quantize", "--in", str(tmp_path / "model"),
                    "--out", str(tmp_path / "a1"), "--wbit", "4", "--mode", "ekc",
                    "--no-figures"])
    rc2 = cli_main(["quantize", "--in", str(tmp_path / "model"),
                    "--out", str(tmp_path / "a2"), "--wbit", "4", "--mode", "ekc",
                    "--no-figures"])

    arts1 = load_artifact(tmp_path / "a1")
    arts2 = load_artifact(tmp_path / "a2")
    codes_identical = all(np.array_equal(a.codes, b.codes) for a, b in zip(arts1, arts2))
    scales_identical = all(np.array_equal(a.scales, b.scales) for a, b in zip(arts1, arts2))

    # store -> load is bit-exact against the in-memory artifacts
    source = load_model(tmp_path / "model")
    direct = quantize_model(source, QuantConfig(grid=GRID, mode="ekc"))
    store_artifact(tmp_path / "a3", direct)
    reloaded = load_artifact(tmp_path / "a3")
    round_trip = all(np.array_equal(a.codes, b.codes)
                     and np.array_equal(a.scales.astype(np.float32),
                                        b.scales.astype(np.float32))
                     for a, b in zip(direct, reloaded))

    reports = []
    for name in ("a1", "a2"):
        doc = json.loads((tmp_path / name / "report.json").read_text())
        for entry in doc["tensors"]:
            entry.pop("timing_us")
        reports.append(json.dumps(doc, sort_keys=True))
    report_identical = reports[0] == reports[1]

    rc_verify = cli_main(["verify", "--artifact", str(tmp_path / "a1"),
                          "--source", str(tmp_path / "model")])

    ok = (rc1 == 0 and rc2 == 0 and rc_verify == 0 and codes_identical
          and scales_identical and round_trip and report_identical)
    line = report_line(ok, 8, f"round-trip bit-exact {round_trip}, reruns identical "
                              f"{codes_identical and report_identical}, verify exit {rc_verify}")
    assert ok, line
