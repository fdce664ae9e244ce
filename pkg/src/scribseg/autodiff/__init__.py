from . import ops
from .gradcheck import numeric_grad, relative_error
from .serialize import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import ShapeError, Tensor, as_tensor, backward

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "load_tensor",
    "numeric_grad",
    "ops",
    "relative_error",
    "save_tensor",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
