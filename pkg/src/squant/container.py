"""Directory-based tensor container: JSON manifests plus raw binary blobs.

Input models live in a directory with a manifest.json listing each tensor's
shape and a raw little-endian float32 blob.  Quantized artifacts use the same
pattern: quantized_manifest.json, one int32 codes blob and one float32 scales
blob per tensor, and a report.json.  Blobs carry no header; the manifest is
the single source of truth for shapes, so loads are bit-exact.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import IntegrityError, SchemaError, ValidationError
from .model import LAYER_KINDS, QuantizedTensor, QuantReport, WeightTensor

FORMAT_VERSION = 1

_SLUG_RE = re.compile(r"[^A-Za-z0-9_.-]+")


def _slug(index: int, name: str) -> str:
    return f"{index:03d}_{_SLUG_RE.sub('_', name)}"


def _require(d: dict, key: str, kind, path: str):
    if key not in d:
        raise SchemaError("missing required field", field=f"{path}.{key}")
    value = d[key]
    if kind is int and isinstance(value, bool):
        raise SchemaError("expected an integer", field=f"{path}.{key}")
    if not isinstance(value, kind):
        raise SchemaError(f"expected {kind.__name__}, got {type(value).__name__}",
                          field=f"{path}.{key}")
    return value


def _read_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise SchemaError(f"{what} not found at {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{what} must be a JSON object")
    return doc


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_shape(entry: dict, path: str) -> tuple[int, int, int, int]:
    shape = _require(entry, "shape", list, path)
    if len(shape) != 4 or not all(isinstance(x, int) and not isinstance(x, bool) for x in shape):
        raise SchemaError("shape must be four integers [M, N, KH, KW]", field=f"{path}.shape")
    if min(shape) < 1:
        raise SchemaError("shape entries must be >= 1", field=f"{path}.shape")
    return tuple(shape)


def load_model(dir_path) -> list[WeightTensor]:
    """Load all weight tensors described by <dir>/manifest.json.

    Data is widened from the stored float32 to float64 and reshaped to
    (m, n, kh*kw) in row-major order.
    """
    root = Path(dir_path)
    doc = _read_json(root / "manifest.json", "manifest.json")
    version = _require(doc, "format_version", int, "manifest")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {version}", field="manifest.format_version")
    entries = _require(doc, "tensors", list, "manifest")

    tensors = []
    seen = set()
    for idx, entry in enumerate(entries):
        path = f"manifest.tensors[{idx}]"
        if not isinstance(entry, dict):
            raise SchemaError("tensor entry must be an object", field=path)
        name = _require(entry, "name", str, path)
        if name in seen:
            raise SchemaError(f"duplicate tensor name {name!r}", field=f"{path}.name")
        seen.add(name)
        kind = _require(entry, "layer_kind", str, path)
        if kind not in LAYER_KINDS:
            raise SchemaError(f"layer_kind must be one of {LAYER_KINDS}", field=f"{path}.layer_kind")
        m, n, kh, kw = _parse_shape(entry, path)
        dtype = _require(entry, "dtype", str, path)
        if dtype != "f32":
            raise SchemaError("only dtype f32 is supported", field=f"{path}.dtype")
        byte_order = _require(entry, "byte_order", str, path)
        if byte_order != "little-endian":
            raise SchemaError("only little-endian blobs are supported", field=f"{path}.byte_order")
        data_file = _require(entry, "data_file", str, path)

        blob = root / data_file
        if not blob.is_file():
            raise IntegrityError(f"tensor {name!r}: data file {data_file} does not exist")
        expected = 4 * m * n * kh * kw
        actual = blob.stat().st_size
        if actual != expected:
            raise IntegrityError(
                f"tensor {name!r}: data file {data_file} has {actual} bytes, expected {expected}"
            )
        raw = np.fromfile(blob, dtype="<f4")
        data = raw.astype(np.float64).reshape(m, n, kh * kw)
        tensors.append(
            WeightTensor(name=name, layer_kind=kind, m=m, n=n, kh=kh, kw=kw, data=data).validate()
        )
    return tensors


def store_model(dir_path, tensors: list[WeightTensor]) -> None:
    """Write tensors as a manifest.json + float32 blobs directory."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, t in enumerate(tensors):
        t.validate()
        data_file = _slug(idx, t.name) + ".bin"
        t.data.astype("<f4").tofile(root / data_file)
        entries.append({
            "name": t.name,
            "layer_kind": t.layer_kind,
            "shape": list(t.shape4),
            "dtype": "f32",
            "byte_order": "little-endian",
            "data_file": data_file,
        })
    _write_json(root / "manifest.json", {"format_version": FORMAT_VERSION, "tensors": entries})


def store_artifact(dir_path, artifacts: list[QuantizedTensor]) -> None:
    """Write quantized tensors plus their reports; refuses invalid artifacts.

    Layout: quantized_manifest.json, report.json, and per tensor one int32
    codes blob and one float32 scales blob (both little-endian).  A subsequent
    load_artifact reproduces codes and scales bit-exactly.
    """
    for art in artifacts:
        art.validate()

    root = Path(dir_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IntegrityError(f"cannot create artifact directory {root}: {exc}") from exc

    entries = []
    reports = []
    for idx, art in enumerate(artifacts):
        base = _slug(idx, art.name)
        codes_file = base + ".codes.bin"
        scales_file = base + ".scales.bin"
        art.codes.astype("<i4").tofile(root / codes_file)
        art.scales.astype("<f4").tofile(root / scales_file)
        entries.append({
            "name": art.name,
            "layer_kind": art.layer_kind,
            "shape": list(art.shape4),
            "bit_width": art.bit_width,
            "mode": art.mode,
            "byte_order": "little-endian",
            "codes_file": codes_file,
            "scales_file": scales_file,
        })
        reports.append({"name": art.name, **art.report.to_dict()})

    _write_json(root / "quantized_manifest.json",
                {"format_version": FORMAT_VERSION, "tensors": entries})
    _write_json(root / "report.json", {"format_version": FORMAT_VERSION, "tensors": reports})


def load_artifact(dir_path) -> list[QuantizedTensor]:
    """Load a quantized artifact directory written by store_artifact."""
    root = Path(dir_path)
    doc = _read_json(root / "quantized_manifest.json", "quantized_manifest.json")
    version = _require(doc, "format_version", int, "quantized_manifest")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version {version}",
                          field="quantized_manifest.format_version")
    report_doc = _read_json(root / "report.json", "report.json")
    reports = {r["name"]: QuantReport.from_dict(r)
               for r in report_doc.get("tensors", [])}

    artifacts = []
    for idx, entry in enumerate(_require(doc, "tensors", list, "quantized_manifest")):
        path = f"quantized_manifest.tensors[{idx}]"
        name = _require(entry, "name", str, path)
        kind = _require(entry, "layer_kind", str, path)
        m, n, kh, kw = _parse_shape(entry, path)
        bit_width = _require(entry, "bit_width", int, path)
        mode = _require(entry, "mode", str, path)

        codes_blob = root / _require(entry, "codes_file", str, path)
        scales_blob = root / _require(entry, "scales_file", str, path)
        expected_codes = 4 * m * n * kh * kw
        if not codes_blob.is_file() or codes_blob.stat().st_size != expected_codes:
            raise IntegrityError(f"tensor {name!r}: codes blob missing or wrong size")
        if not scales_blob.is_file() or scales_blob.stat().st_size != 4 * m:
            raise IntegrityError(f"tensor {name!r}: scales blob missing or wrong size")

        codes = np.fromfile(codes_blob, dtype="<i4").reshape(m, n, kh * kw)
        scales = np.fromfile(scales_blob, dtype="<f4").astype(np.float64)
        if name not in reports:
            raise IntegrityError(f"tensor {name!r}: no entry in report.json")
        art = QuantizedTensor(
            name=name, layer_kind=kind, shape4=(m, n, kh, kw), bit_width=bit_width,
            mode=mode, codes=codes, scales=scales, report=reports[name],
        )
        try:
            art.validate()
        except ValidationError as exc:
            raise IntegrityError(str(exc)) from exc
        artifacts.append(art)
    return artifacts
