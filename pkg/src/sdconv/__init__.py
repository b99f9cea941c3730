"""Smoothed dilated 2-D convolutions with exact gradients and analysis tools."""

import os as _os

# Single-threaded BLAS by default: the GEMMs here are small enough that
# thread fan-out costs more than it saves, and a fixed thread count keeps
# results byte-reproducible across differently provisioned hosts. Only a
# default; set the env vars beforehand to override.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

from sdconv.tensor import Rng, Tensor, elementwise, random_uniform, zeros
from sdconv.conv import (
    ConvSpec,
    ConvWeights,
    SmoothingFilter,
    build_smoothing_filter,
    dilated_conv2d,
    fuse_effective_kernel,
    smooth_channelwise,
    smooth_separable,
    smoothed_dilated_conv2d,
)
from sdconv.autodiff import (
    GradReport,
    Tape,
    backward,
    check_gradients,
    finite_difference_gradient,
)
from sdconv.aggregation import AggregatedFilter, AlphaTrajectory, new_aggregated
from sdconv.gridding import (
    DependencyMap,
    LayerStack,
    export_dependency_art,
    gridding_score,
    trace_dependencies,
)
from sdconv.errors import (
    ConfigError,
    GenerationError,
    ParameterError,
    TrainingError,
    UnsupportedKindError,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatedFilter",
    "AlphaTrajectory",
    "ConfigError",
    "ConvSpec",
    "ConvWeights",
    "DependencyMap",
    "GenerationError",
    "GradReport",
    "LayerStack",
    "ParameterError",
    "Rng",
    "SmoothingFilter",
    "Tape",
    "Tensor",
    "TrainingError",
    "UnsupportedKindError",
    "backward",
    "build_smoothing_filter",
    "check_gradients",
    "dilated_conv2d",
    "elementwise",
    "export_dependency_art",
    "finite_difference_gradient",
    "fuse_effective_kernel",
    "gridding_score",
    "new_aggregated",
    "random_uniform",
    "smooth_channelwise",
    "smooth_separable",
    "smoothed_dilated_conv2d",
    "trace_dependencies",
    "zeros",
]
