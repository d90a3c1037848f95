"""Quantization-aware training with adaptive activation step sizes and
power-of-sqrt(2) weight levels, on a small numpy autograd engine."""

from .layers import ModelConfig, QuantPolicy, build_model
from .quantizers import (IntRange, asq_backward, asq_forward, make_levels, post_levels, pot_levels,
                         quant_dequant_uniform, uniform_backward)

__version__ = "0.1.0"

__all__ = ["IntRange", "ModelConfig", "QuantPolicy", "asq_backward", "asq_forward", "build_model",
           "make_levels", "post_levels", "pot_levels", "quant_dequant_uniform", "uniform_backward"]
