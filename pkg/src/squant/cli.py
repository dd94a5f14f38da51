"""Command-line surface: synth, quantize, verify, oracle, eval.

Exit codes: 0 success, 1 schema/spec errors, 2 invariant or validation
violations (including I/O failures while writing), 3 verification failures,
4 oracle mismatches.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .container import load_artifact, load_model, store_artifact, store_model
from .engine import squant_tensor
from .errors import IntegrityError, SchemaError, SQuantError, ValidationError
from .grid import MODES, QuantConfig, QuantGrid, compute_scales
from .model import WeightTensor
from .oracle import BRUTE_FORCE_LIMIT, brute_force_min, uniform_objective_ek
from .reference import (SyntheticModelSpec, build_synthetic_model, evaluate_modes,
                        make_random_model, resnet18_layer_shapes)
from .verify import verify_artifact

EXIT_OK = 0
EXIT_SCHEMA = 1
EXIT_INVARIANT = 2
EXIT_VERIFY = 3
EXIT_ORACLE = 4


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _add_quantize(sub):
    p = sub.add_parser("quantize", help="quantize a model directory")
    p.add_argument("--in", dest="in_dir", required=True, help="input model directory")
    p.add_argument("--out", dest="out_dir", required=True, help="artifact output directory")
    p.add_argument("--wbit", type=int, default=4, help="weight bit width (2..8)")
    p.add_argument("--mode", choices=MODES, default="ekc")
    p.add_argument("--re", dest="r_e", type=float, default=1.0)
    p.add_argument("--rk", dest="r_k", type=float, default=1.0)
    p.add_argument("--rc", dest="r_c", type=float, default=0.5)
    p.add_argument("--topk-cap", dest="topk_cap", type=int, default=32)
    p.add_argument("--workers", type=int, default=1, help="channel-parallel worker threads")
    p.add_argument("--no-figures", action="store_true", help="skip report figure rendering")


def cmd_quantize(args) -> int:
    try:
        tensors = load_model(args.in_dir)
    except (SchemaError, IntegrityError) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    try:
        config = QuantConfig(grid=QuantGrid(args.wbit), mode=args.mode, r_e=args.r_e,
                             r_k=args.r_k, r_c=args.r_c, topk_cap_c=args.topk_cap)
    except ValidationError as exc:
        return _fail(EXIT_INVARIANT, str(exc))

    artifacts = []
    for t in tensors:
        try:
            quantized, _ = squant_tensor(t, config, workers=args.workers)
        except ValidationError as exc:
            return _fail(EXIT_INVARIANT, f"tensor {t.name!r}: {exc}")
        r = quantized.report
        flagged = sorted(r.flagged_channels())
        print(f"{t.name}: shape {t.shape4}, kernel flips {r.kernel_flips}, "
              f"channel flips {r.channel_flips}, max channel CASE "
              f"{max(r.channel_case) if r.channel_case else 0.0:.4f}, "
              f"flagged {len(flagged)}, {r.timing_us} us")
        artifacts.append(quantized)

    try:
        store_artifact(args.out_dir, artifacts)
    except (ValidationError, IntegrityError) as exc:
        return _fail(EXIT_INVARIANT, str(exc))
    except OSError as exc:
        return _fail(EXIT_INVARIANT, f"cannot write artifact: {exc}")

    out = Path(args.out_dir)
    _write_report_csv(out / "report.csv", artifacts)
    if not args.no_figures:
        from .plots import save_case_figure
        save_case_figure(artifacts, out / "report_case.png")
    total_us = sum(a.report.timing_us for a in artifacts)
    print(f"quantized {len(artifacts)} tensors in {total_us} us -> {args.out_dir}")
    return EXIT_OK


def _write_report_csv(path, artifacts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "mode", "bit_width", "kernel_flips", "channel_flips",
                         "flip_backs", "max_kernel_case", "max_channel_case",
                         "flagged_channels", "timing_us"])
        for a in artifacts:
            r = a.report
            writer.writerow([
                a.name, r.mode, r.bit_width, r.kernel_flips, r.channel_flips, r.flip_backs,
                f"{r.max_kernel_case:.9f}",
                f"{max(r.channel_case) if r.channel_case else 0.0:.9f}",
                len(r.flagged_channels()), r.timing_us,
            ])


def _add_verify(sub):
    p = sub.add_parser("verify", help="check an artifact against its source model")
    p.add_argument("--artifact", required=True)
    p.add_argument("--source", required=True)


def cmd_verify(args) -> int:
    try:
        tensors = load_model(args.source)
        artifacts = load_artifact(args.artifact)
        violations = verify_artifact(tensors, artifacts)
    except (SchemaError, IntegrityError) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    if violations:
        for v in violations[:10]:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"verified {len(artifacts)} tensors: all bounds hold")
    return EXIT_OK


def _add_oracle(sub):
    p = sub.add_parser("oracle", help="compare the engine against brute force")
    p.add_argument("--seeds", type=int, required=True, help="number of random channels")
    p.add_argument("--max-n", dest="max_n", type=int, default=3)
    p.add_argument("--max-k", dest="max_k", type=int, default=4)
    p.add_argument("--wbit", type=int, default=4)


def cmd_oracle(args) -> int:
    if args.max_n < 1 or args.max_k < 1 or args.seeds < 0:
        return _fail(EXIT_SCHEMA, "seeds must be >= 0 and bounds >= 1")
    if args.max_n * args.max_k > BRUTE_FORCE_LIMIT:
        return _fail(EXIT_SCHEMA,
                     f"refusing: 3**{args.max_n * args.max_k} assignments exceeds "
                     f"the brute-force bound N*K <= {BRUTE_FORCE_LIMIT}")
    grid = QuantGrid(args.wbit)
    config = QuantConfig(grid=grid, mode="ek")
    equal = 0
    first_bad = None
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, args.max_n + 1))
        k = int(rng.integers(1, args.max_k + 1))
        data = rng.normal(0.0, 1.0, size=(1, n, k))
        tensor = WeightTensor(f"seed{seed}", "conv", 1, n, 1, k, data)

        quantized, _ = squant_tensor(tensor, config)
        scale = compute_scales(data, grid)[0]
        scaled = data[0] / scale
        engine_value = uniform_objective_ek(quantized.codes[0] - scaled)
        _, oracle_value = brute_force_min(scaled, grid, objective="element_kernel")

        if abs(engine_value - oracle_value) <= 1e-12 * max(1.0, abs(oracle_value)):
            equal += 1
        elif first_bad is None:
            first_bad = (seed, engine_value, oracle_value)

    print(f"{equal}/{args.seeds} channels matched the brute-force minimum")
    if first_bad is not None:
        seed, ev, ov = first_bad
        return _fail(EXIT_ORACLE,
                     f"mismatch at seed {seed}: engine {ev!r} vs oracle {ov!r}")
    return EXIT_OK


def _add_eval(sub):
    p = sub.add_parser("eval", help="measure per-mode output MSE on a synthetic model")
    p.add_argument("--spec", required=True, help="SyntheticModelSpec JSON file")
    p.add_argument("--wbit", type=int, default=4)
    p.add_argument("--inputs", type=int, default=256)
    p.add_argument("--modes", default="e,ekc", help="comma-separated mode list")
    p.add_argument("--out", dest="out_dir", default=".", help="where results and figures go")
    p.add_argument("--no-figures", action="store_true")


def cmd_eval(args) -> int:
    try:
        spec = SyntheticModelSpec.from_json(args.spec)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes or any(m not in MODES for m in modes):
        return _fail(EXIT_SCHEMA, f"modes must come from {MODES}, got {args.modes!r}")
    try:
        result = evaluate_modes(spec, args.wbit, args.inputs, modes)
    except (ValidationError, SchemaError) as exc:
        return _fail(EXIT_SCHEMA, str(exc))

    for mode in modes:
        info = result.modes[mode]
        layers = ", ".join(f"{v:.6g}" for v in info["per_layer_mse"])
        print(f"mode {mode}: end-to-end MSE {info['end_to_end_mse']:.6g} "
              f"(per-layer: {layers})")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_result.json", "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "eval_result.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "metric", "value"])
        for mode in modes:
            info = result.modes[mode]
            for idx, v in enumerate(info["per_layer_mse"]):
                writer.writerow([mode, f"layer{idx:02d}_mse", f"{v:.12g}"])
            writer.writerow([mode, "end_to_end_mse", f"{info['end_to_end_mse']:.12g}"])
    if not args.no_figures:
        from .plots import save_eval_figure
        save_eval_figure(result, out / "eval_mse.png")
    return EXIT_OK


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a random model directory")
    p.add_argument("--out", dest="out_dir", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--arch", choices=["resnet18"], help="named layer-shape set")
    group.add_argument("--spec", help="SyntheticModelSpec JSON file")
    p.add_argument("--seed", type=int, default=0)


def cmd_synth(args) -> int:
    try:
        if args.arch == "resnet18":
            tensors = make_random_model(resnet18_layer_shapes(), seed=args.seed)
        else:
            spec = SyntheticModelSpec.from_json(args.spec)
            tensors = build_synthetic_model(spec)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    try:
        store_model(args.out_dir, tensors)
    except OSError as exc:
        return _fail(EXIT_INVARIANT, f"cannot write model: {exc}")
    total = sum(t.data.size for t in tensors)
    print(f"wrote {len(tensors)} tensors ({total} weights) -> {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="squant",
        description="Data-free post-training weight quantization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_quantize(sub)
    _add_verify(sub)
    _add_oracle(sub)
    _add_eval(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "quantize": cmd_quantize,
        "verify": cmd_verify,
        "oracle": cmd_oracle,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except SQuantError as exc:
        return _fail(EXIT_SCHEMA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
