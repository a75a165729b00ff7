from . import ops
from .tensor import Tape, Tensor, active_tape, as_tensor, grad, resolve_dtype

__all__ = ["Tape", "Tensor", "active_tape", "as_tensor", "grad", "ops", "resolve_dtype"]
