"""Stage-wise depth attention for residual networks on a small numpy autodiff engine."""

from .model import ArchitectureSpec, Model, StageSpec, build, count_flops, count_params, preset
from .sda import SdaParams, nonadaptive_forward, sda_forward
from .tensor import Tensor, backward, finite_diff_check, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "Model", "StageSpec", "build", "count_flops", "count_params", "preset",
    "SdaParams", "nonadaptive_forward", "sda_forward",
    "Tensor", "backward", "finite_diff_check", "no_grad", "precision",
]
