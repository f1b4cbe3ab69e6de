"""Capsule networks with adaptive routing on a small numpy autodiff engine."""

from . import tensor
from .tensor import Tensor, Tape, backward, set_default_dtype

__all__ = ["tensor", "Tensor", "Tape", "backward", "set_default_dtype"]
