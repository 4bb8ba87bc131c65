"""Modular MHA/FFN function library for the parallel strategy set."""

from .executors import (
    KEY_TILE,
    REGISTRY,
    STRATEGY_ORDER,
    FunctionRegistry,
    LayerWeights,
    OpKind,
    Strategy,
    default_registry,
    ffn,
    io_layouts,
    mha,
    registry_lookup,
)
from .reference import DenseWeights, gelu, layer_norm, reference_ffn, reference_mha

__all__ = [
    "KEY_TILE", "REGISTRY", "STRATEGY_ORDER", "FunctionRegistry", "LayerWeights",
    "OpKind", "Strategy", "default_registry", "ffn", "io_layouts", "mha", "registry_lookup",
    "DenseWeights", "gelu", "layer_norm", "reference_ffn", "reference_mha",
]
