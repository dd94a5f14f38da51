"""Data-free post-training weight quantization via progressive CASE-minimizing flips."""

from .container import load_artifact, load_model, store_artifact, store_model
from .engine import (FlipCandidate, FlipRecord, PerturbationState, case_of, flip_count,
                     quantize_model, squant_e, squant_flip, squant_tensor,
                     update_perturbation)
from .errors import (GramDegeneracyError, IntegrityError, SchemaError, SQuantError,
                     ValidationError)
from .grid import (QuantConfig, QuantGrid, compute_scale, compute_scales, dequantize,
                   round_to_grid)
from .model import QuantizedTensor, QuantReport, WeightTensor
from .oracle import (GramDecomposition, ObjectiveBreakdown, approximation_precision,
                     brute_force_min, brute_force_min_full_grid, decompose_gram,
                     eval_precise_objective, synthetic_gram, uniform_objective_ek,
                     uniform_objective_full)
from .reference import (EvalResult, SyntheticModelSpec, build_synthetic_model,
                        conv2d_forward, evaluate_modes, make_random_model,
                        model_forward, resnet18_layer_shapes)
from .verify import Violation, verify_artifact

__version__ = "0.1.0"

__all__ = [
    "FlipCandidate", "FlipRecord", "PerturbationState", "QuantConfig", "QuantGrid",
    "QuantReport", "QuantizedTensor", "WeightTensor", "EvalResult", "SyntheticModelSpec",
    "GramDecomposition", "ObjectiveBreakdown", "Violation",
    "SQuantError", "SchemaError", "IntegrityError", "ValidationError", "GramDegeneracyError",
    "approximation_precision", "brute_force_min", "brute_force_min_full_grid",
    "build_synthetic_model", "case_of", "compute_scale", "compute_scales", "conv2d_forward",
    "decompose_gram", "dequantize", "eval_precise_objective", "evaluate_modes",
    "flip_count", "load_artifact", "load_model", "make_random_model", "model_forward",
    "quantize_model", "resnet18_layer_shapes", "round_to_grid", "squant_e", "squant_flip",
    "squant_tensor", "store_artifact", "store_model", "synthetic_gram",
    "uniform_objective_ek", "uniform_objective_full", "update_perturbation",
    "verify_artifact",
]
