from ._kernels import BACKEND as KERNEL_BACKEND
from .checkpoint import load_adapters, load_model, save_adapters, save_model
from .lora import (
    SEVEN_TARGETS,
    LoraAdapter,
    LoraConfig,
    LoraLinear,
    ParamCount,
    ShapeError,
    count_parameters,
    inject_adapters,
    lora_forward,
    merge_adapter,
)
from .model import ToyTransformer, ToyTransformerConfig, transformer_forward

__all__ = [
    "KERNEL_BACKEND",
    "SEVEN_TARGETS",
    "LoraAdapter",
    "LoraConfig",
    "LoraLinear",
    "ParamCount",
    "ShapeError",
    "ToyTransformer",
    "ToyTransformerConfig",
    "count_parameters",
    "inject_adapters",
    "load_adapters",
    "load_model",
    "lora_forward",
    "merge_adapter",
    "save_adapters",
    "save_model",
    "transformer_forward",
]
