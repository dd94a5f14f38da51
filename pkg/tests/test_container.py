import json

import numpy as np
import pytest

from squant import (IntegrityError, QuantConfig, QuantizedTensor, QuantReport, SchemaError,
                    ValidationError, WeightTensor, load_artifact, load_model, squant_tensor,
                    store_artifact, store_model)


def write_manifest(tmp_path, tensors, format_version=1):
    doc = {"format_version": format_version, "tensors": tensors}
    (tmp_path / "manifest.json").write_text(json.dumps(doc))


def write_blob(tmp_path, name, values):
    np.asarray(values, dtype="<f4").tofile(tmp_path / name)


def conv_entry(name="conv0", shape=(2, 1, 3, 3), data_file="conv0.bin"):
    return {"name": name, "layer_kind": "conv", "shape": list(shape), "dtype": "f32",
            "byte_order": "little-endian", "data_file": data_file}


class TestLoadModel:
    def test_conv_shape_maps_to_mnk(self, tmp_path):
        write_manifest(tmp_path, [conv_entry()])
        write_blob(tmp_path, "conv0.bin", np.arange(18.0))
        (tensor,) = load_model(tmp_path)
        assert (tensor.m, tensor.n, tensor.k) == (2, 1, 9)
        assert tensor.data.shape == (2, 1, 9)
        assert tensor.data.dtype == np.float64

    def test_fc_convention(self, tmp_path):
        entry = {"name": "fc", "layer_kind": "fc", "shape": [10, 4, 1, 1], "dtype": "f32",
                 "byte_order": "little-endian", "data_file": "fc.bin"}
        write_manifest(tmp_path, [entry])
        write_blob(tmp_path, "fc.bin", np.zeros(40))
        (tensor,) = load_model(tmp_path)
        assert (tensor.m, tensor.n, tensor.k) == (10, 4, 1)

    def test_short_blob_is_integrity_error(self, tmp_path):
        write_manifest(tmp_path, [conv_entry()])
        (tmp_path / "conv0.bin").write_bytes(b"\x00" * 71)
        with pytest.raises(IntegrityError, match="conv0"):
            load_model(tmp_path)

    def test_load_is_lossless(self, tmp_path):
        rng = np.random.default_rng(3)
        values = rng.normal(size=18).astype(np.float32)
        write_manifest(tmp_path, [conv_entry()])
        write_blob(tmp_path, "conv0.bin", values)
        (tensor,) = load_model(tmp_path)
        assert np.array_equal(tensor.data.reshape(-1).astype(np.float32), values)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SchemaError, match="manifest.json"):
            load_model(tmp_path)

    def test_schema_error_names_field(self, tmp_path):
        entry = conv_entry()
        del entry["layer_kind"]
        write_manifest(tmp_path, [entry])
        with pytest.raises(SchemaError, match=r"tensors\[0\].layer_kind"):
            load_model(tmp_path)

    def test_duplicate_names_rejected(self, tmp_path):
        write_manifest(tmp_path, [conv_entry(), conv_entry()])
        write_blob(tmp_path, "conv0.bin", np.zeros(18))
        with pytest.raises(SchemaError, match="duplicate"):
            load_model(tmp_path)

    def test_bad_shape_rejected(self, tmp_path):
        entry = conv_entry()
        entry["shape"] = [2, 1, 3]
        write_manifest(tmp_path, [entry])
        with pytest.raises(SchemaError, match="shape"):
            load_model(tmp_path)

    def test_store_then_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        tensors = [
            WeightTensor("a", "conv", 2, 3, 3, 3, rng.normal(size=(2, 3, 9))),
            WeightTensor("b", "fc", 4, 2, 1, 1, rng.normal(size=(4, 2, 1))),
        ]
        store_model(tmp_path / "model", tensors)
        loaded = load_model(tmp_path / "model")
        assert [t.name for t in loaded] == ["a", "b"]
        for orig, back in zip(tensors, loaded):
            assert np.array_equal(back.data, orig.data.astype(np.float32).astype(np.float64))


def quantize_fixture(rng, names=("w0", "w1")):
    tensors = [WeightTensor(n, "conv", 3, 2, 3, 3, rng.normal(size=(3, 2, 9))) for n in names]
    return tensors, [squant_tensor(t, QuantConfig())[0] for t in tensors]


class TestArtifactStore:
    def test_round_trip_bit_exact(self, tmp_path):
        _, artifacts = quantize_fixture(np.random.default_rng(0))
        store_artifact(tmp_path / "art", artifacts)
        loaded = load_artifact(tmp_path / "art")
        for orig, back in zip(artifacts, loaded):
            assert np.array_equal(back.codes, orig.codes)
            assert np.array_equal(back.scales.astype(np.float32),
                                  orig.scales.astype(np.float32))
            assert back.shape4 == orig.shape4
            assert back.report.to_dict() == orig.report.to_dict()

    def test_empty_artifact_list(self, tmp_path):
        store_artifact(tmp_path / "art", [])
        doc = json.loads((tmp_path / "art" / "quantized_manifest.json").read_text())
        assert doc["tensors"] == []
        assert load_artifact(tmp_path / "art") == []

    def test_code_outside_grid_refused(self, tmp_path):
        art = QuantizedTensor(
            name="bad", layer_kind="conv", shape4=(1, 1, 1, 1), bit_width=4, mode="e",
            codes=np.array([[[99]]], dtype=np.int32), scales=np.array([1.0]),
            report=QuantReport(mode="e", bit_width=4),
        )
        with pytest.raises(ValidationError, match="grid"):
            store_artifact(tmp_path / "art", [art])
        assert not (tmp_path / "art").exists()

    def test_truncated_codes_blob_detected(self, tmp_path):
        _, artifacts = quantize_fixture(np.random.default_rng(1))
        store_artifact(tmp_path / "art", artifacts)
        doc = json.loads((tmp_path / "art" / "quantized_manifest.json").read_text())
        blob = tmp_path / "art" / doc["tensors"][0]["codes_file"]
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(IntegrityError):
            load_artifact(tmp_path / "art")

    def test_blobs_are_little_endian(self, tmp_path):
        # one known code pattern, byte-level check
        art = QuantizedTensor(
            name="t", layer_kind="fc", shape4=(1, 1, 1, 1), bit_width=4, mode="e",
            codes=np.array([[[-2]]], dtype=np.int32), scales=np.array([1.0]),
            report=QuantReport(mode="e", bit_width=4),
        )
        store_artifact(tmp_path / "art", [art])
        doc = json.loads((tmp_path / "art" / "quantized_manifest.json").read_text())
        raw = (tmp_path / "art" / doc["tensors"][0]["codes_file"]).read_bytes()
        assert raw == (-2).to_bytes(4, "little", signed=True)
