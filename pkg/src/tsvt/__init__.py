"""Two-stream video transformer with classical optical flow, built from scratch."""

from .tensor import Tensor, backward

__all__ = ["Tensor", "backward"]
__version__ = "0.1.0"
