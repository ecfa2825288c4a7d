"""Compression-aware training via occasional weight regularization.

Train normally for a configurable number of mini-batches, transform the
weights through a compression operator (magnitude pruning, multi-bit
binary-code quantization, truncated/tiled SVD, or Tucker-2), and continue
training from the full-precision result. The package also ships the
regularization-strength metrics and convergence analytics that explain why
the event frequency acts as an independent regularization knob.
"""

from . import analysis, compress, config, data, nn, schedule, tensor
from .compress import CompressionSpec
from .schedule import GradualSchedule, MetricRecord, NrHook, NrSchedule
from .tensor import RngStream, Tensor

__version__ = "0.1.0"

__all__ = [
    "CompressionSpec",
    "GradualSchedule",
    "MetricRecord",
    "NrHook",
    "NrSchedule",
    "RngStream",
    "Tensor",
    "analysis",
    "compress",
    "config",
    "data",
    "nn",
    "schedule",
    "tensor",
]
