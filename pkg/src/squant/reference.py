"""Reference forward pass and synthetic models for measuring quantization MSE.

The convolution is the direct definition y[m,h,w] = sum_{n,i,j} W[m,n,i,j] *
x[n,h-i,w-j] (true convolution, kernel flipped relative to cross-correlation),
with stride 1 and same/valid padding only.  Fully connected layers are the
1x1 special case applied across the feature map.  No im2col, no FFT; this is
the slow-but-obvious implementation the quantizer is judged against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError
from .grid import QuantConfig, QuantGrid, dequantize
from .model import WeightTensor

PADDINGS = ("same", "valid")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, padding: str = "valid") -> np.ndarray:
    """Direct 2-D convolution of (N, H, W) or (B, N, H, W) inputs.

    weights has shape (M, N, KH, KW).  "valid" yields (H-KH+1, W-KW+1)
    outputs; "same" zero-pads so spatial size is preserved.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise ValidationError(f"weights must be 4-D (M, N, KH, KW), got {w.shape}")
    if padding not in PADDINGS:
        raise ValidationError(f"padding must be one of {PADDINGS}")
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ValidationError(f"input must be (N, H, W) or (B, N, H, W), got {x.shape}")
        x = x[None]
    m, n, kh, kw = w.shape
    if x.shape[1] != n:
        raise ValidationError(f"input has {x.shape[1]} channels, weights expect {n}")

    if padding == "same":
        pb_h, pb_w = kh - 1 - (kh - 1) // 2, kw - 1 - (kw - 1) // 2
        x = np.pad(x, ((0, 0), (0, 0), (pb_h, kh - 1 - pb_h), (pb_w, kw - 1 - pb_w)))
    b, _, ih, iw = x.shape
    oh, ow = ih - kh + 1, iw - kw + 1
    if oh < 1 or ow < 1:
        raise ValidationError(f"kernel ({kh}, {kw}) larger than input ({ih}, {iw})")

    out = np.zeros((b, m, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            # output o reads input at o + (kh-1) - i: the flipped-kernel offset
            sl = x[:, :, kh - 1 - i:kh - 1 - i + oh, kw - 1 - j:kw - 1 - j + ow]
            out += np.einsum("mn,bnhw->bmhw", w[:, :, i, j], sl, optimize=True)
    return out if batched else out[0]


@dataclass
class LayerSpec:
    kind: str
    m: int
    n: int
    kh: int
    kw: int
    stride: int = 1
    padding: str = "same"
    sigma: float = 1.0


@dataclass
class SyntheticModelSpec:
    """Seeded random model description: layer shapes plus weight std-devs.

    Evaluation inputs are unit-variance Gaussian pixels shifted by input_mean,
    plus an optional per-channel DC offset with std input_channel_std.  The
    defaults give plain standard-normal inputs; nonzero values emulate the
    positive means and channel-level correlation of real feature maps, which
    is the regime where error-sum cancellation pays off.
    """

    seed: int
    layers: list[LayerSpec]
    input_hw: tuple[int, int] = (8, 8)
    input_mean: float = 0.0
    input_channel_std: float = 0.0

    def validate(self) -> "SyntheticModelSpec":
        if not self.layers:
            raise ValidationError("model spec needs at least one layer")
        if self.input_channel_std < 0:
            raise ValidationError("input_channel_std must be >= 0")
        prev_m = None
        for idx, layer in enumerate(self.layers):
            where = f"layers[{idx}]"
            if layer.kind not in ("conv", "fc"):
                raise ValidationError(f"{where}: kind must be conv or fc")
            if layer.kind == "fc" and (layer.kh != 1 or layer.kw != 1):
                raise ValidationError(f"{where}: fc layers use kh = kw = 1")
            if layer.stride != 1:
                raise ValidationError(f"{where}: only stride 1 is supported")
            if layer.padding not in PADDINGS:
                raise ValidationError(f"{where}: padding must be one of {PADDINGS}")
            if min(layer.m, layer.n, layer.kh, layer.kw) < 1 or layer.sigma <= 0:
                raise ValidationError(f"{where}: shape entries must be >= 1 and sigma > 0")
            if prev_m is not None and layer.n != prev_m:
                raise ValidationError(
                    f"{where}: input channels {layer.n} != previous layer's {prev_m} outputs"
                )
            prev_m = layer.m
        if min(self.input_hw) < 1:
            raise ValidationError("input_hw entries must be >= 1")
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticModelSpec":
        try:
            layers = [LayerSpec(
                kind=entry["kind"],
                m=int(entry["m"]), n=int(entry["n"]),
                kh=int(entry.get("kh", 1)), kw=int(entry.get("kw", 1)),
                stride=int(entry.get("stride", 1)),
                padding=entry.get("padding", "same"),
                sigma=float(entry.get("sigma", 1.0)),
            ) for entry in doc["layers"]]
            spec = cls(seed=int(doc["seed"]), layers=layers,
                       input_hw=tuple(doc.get("input_hw", (8, 8))),
                       input_mean=float(doc.get("input_mean", 0.0)),
                       input_channel_std=float(doc.get("input_channel_std", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad model spec: {exc}") from exc
        try:
            return spec.validate()
        except ValidationError as exc:
            raise SchemaError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "SyntheticModelSpec":
        path = Path(path)
        if not path.is_file():
            raise SchemaError(f"model spec file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"model spec is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def build_synthetic_model(spec: SyntheticModelSpec) -> list[WeightTensor]:
    """Materialize a spec's weights: layer l ~ N(0, sigma_l), seeded."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    tensors = []
    for idx, layer in enumerate(spec.layers):
        data = rng.normal(0.0, layer.sigma, size=(layer.m, layer.n, layer.kh * layer.kw))
        tensors.append(WeightTensor(
            name=f"layer{idx:02d}_{layer.kind}", layer_kind=layer.kind,
            m=layer.m, n=layer.n, kh=layer.kh, kw=layer.kw, data=data,
        ).validate())
    return tensors


def resnet18_layer_shapes() -> list[tuple[str, str, int, int, int, int]]:
    """The 21 weight-layer shapes of a ResNet18: (name, kind, M, N, KH, KW)."""
    shapes = [("conv1", "conv", 64, 3, 7, 7)]
    stage_channels = [(64, 64), (128, 64), (256, 128), (512, 256)]
    for stage, (out_c, in_c) in enumerate(stage_channels, start=1):
        for block in range(2):
            first_in = in_c if block == 0 else out_c
            shapes.append((f"layer{stage}.{block}.conv1", "conv", out_c, first_in, 3, 3))
            shapes.append((f"layer{stage}.{block}.conv2", "conv", out_c, out_c, 3, 3))
        if in_c != out_c:
            shapes.append((f"layer{stage}.0.downsample", "conv", out_c, in_c, 1, 1))
    shapes.append(("fc", "fc", 1000, 512, 1, 1))
    return shapes


def make_random_model(shapes, seed: int = 0) -> list[WeightTensor]:
    """Random weights for a list of layer shapes, std 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    tensors = []
    for name, kind, m, n, kh, kw in shapes:
        sigma = 1.0 / np.sqrt(n * kh * kw)
        data = rng.normal(0.0, sigma, size=(m, n, kh * kw))
        tensors.append(WeightTensor(name=name, layer_kind=kind, m=m, n=n,
                                    kh=kh, kw=kw, data=data).validate())
    return tensors


def _layer_weights(tensor: WeightTensor) -> np.ndarray:
    return tensor.data.reshape(tensor.m, tensor.n, tensor.kh, tensor.kw)


def model_forward(weight_arrays, paddings, x: np.ndarray) -> list[np.ndarray]:
    """Run the stack of layers, returning every layer's output."""
    outputs = []
    cur = x
    for w, pad in zip(weight_arrays, paddings):
        cur = conv2d_forward(cur, w, padding=pad)
        outputs.append(cur)
    return outputs


@dataclass
class EvalResult:
    """Per-mode quantization-error measurements on one synthetic model.

    per_layer_mse[l] isolates layer l: its quantized weights applied to the
    full-precision input activations of that layer.  end_to_end_mse runs the
    whole quantized stack.  Activations stay full precision throughout; this
    is a weight-only study.
    """

    bit_width: int
    n_inputs: int
    input_shape: tuple[int, ...]
    input_mean: float = 0.0
    input_channel_std: float = 0.0
    modes: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "bit_width": self.bit_width,
            "n_inputs": self.n_inputs,
            "input_shape": list(self.input_shape),
            "input_mean": self.input_mean,
            "input_channel_std": self.input_channel_std,
            "modes": self.modes,
        }


def evaluate_modes(spec: SyntheticModelSpec, bit_width: int, n_inputs: int,
                   modes, workers: int | None = None) -> EvalResult:
    """Quantize a synthetic model under each mode and measure output MSE."""
    from .engine import squant_tensor  # local import keeps module deps one-way

    spec.validate()
    tensors = build_synthetic_model(spec)
    paddings = [layer.padding for layer in spec.layers]
    fp_weights = [_layer_weights(t) for t in tensors]

    h, w = spec.input_hw
    n0 = spec.layers[0].n
    rng = np.random.default_rng(spec.seed + 1_000_003)
    x = rng.standard_normal(size=(n_inputs, n0, h, w)) + spec.input_mean
    if spec.input_channel_std:
        x += spec.input_channel_std * rng.standard_normal(size=(n_inputs, n0, 1, 1))
    fp_outputs = model_forward(fp_weights, paddings, x)

    result = EvalResult(bit_width=bit_width, n_inputs=n_inputs, input_shape=x.shape[1:],
                        input_mean=spec.input_mean, input_channel_std=spec.input_channel_std)
    grid = QuantGrid(bit_width)
    for mode in modes:
        config = QuantConfig(grid=grid, mode=mode)
        q_weights = []
        for t in tensors:
            quantized, _ = squant_tensor(t, config, workers=workers)
            deq = dequantize(quantized.codes, quantized.scales)
            q_weights.append(deq.reshape(t.m, t.n, t.kh, t.kw))

        per_layer = []
        layer_input = x
        for idx, (wq, pad) in enumerate(zip(q_weights, paddings)):
            isolated = conv2d_forward(layer_input, wq, padding=pad)
            per_layer.append(float(np.mean((isolated - fp_outputs[idx]) ** 2)))
            layer_input = fp_outputs[idx]

        q_outputs = model_forward(q_weights, paddings, x)
        end_to_end = float(np.mean((q_outputs[-1] - fp_outputs[-1]) ** 2))
        result.modes[mode] = {"per_layer_mse": per_layer, "end_to_end_mse": end_to_end}
    return result
