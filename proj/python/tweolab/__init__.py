"""Python face of the outlier-aware training lab's C++ core."""

from ._core import (
    absmax_quantize_dequantize,
    colinearity,
    fp8_decode,
    fp8_encode,
    fp8_max_finite,
    singular_values,
    tweo_lambda,
    tweo_penalty,
)

__all__ = [
    "absmax_quantize_dequantize",
    "colinearity",
    "fp8_decode",
    "fp8_encode",
    "fp8_max_finite",
    "singular_values",
    "tweo_lambda",
    "tweo_penalty",
]
