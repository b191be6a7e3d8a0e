"""Bottleneck-transformer pose estimation in numpy: model, losses, pretraining, evaluation, explanations."""

from .model import BTranspose, ModelSpec, build_model, count_params, parse_name, tiny_spec
from .tensor import Tensor, default_dtype, no_grad

__all__ = ["BTranspose", "ModelSpec", "Tensor", "build_model", "count_params", "default_dtype", "no_grad",
           "parse_name", "tiny_spec"]
__version__ = "0.1.0"
