"""Ternary-weight, matrix-multiplication-free language models with fixed shared gates."""
from __future__ import annotations

from .accounting import ParamReport, count_params, memory_report
from .layers import MatMulFreeLM, ModelConfig
from .reservoir import SharedFixed, spectral_radius
from .ternary import TernaryMatrix, quantize_absmean, ternary_matmul
from .train import TrainConfig, evaluate, generate, train

__all__ = [
    "MatMulFreeLM", "ModelConfig", "ParamReport", "SharedFixed", "TernaryMatrix", "TrainConfig",
    "count_params", "evaluate", "generate", "memory_report", "quantize_absmean", "spectral_radius",
    "ternary_matmul", "train",
]
__version__ = "0.1.0"
