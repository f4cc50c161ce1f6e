"""hsifuse: two-modality pixel classification on diffusion-noised patch stacks."""

__version__ = "0.1.0"

from .tensor import Tensor, Param, ComplexTensor, Module, grad_check  # noqa: F401
