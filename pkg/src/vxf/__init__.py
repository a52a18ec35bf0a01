"""Volumetric segmentation with Transformer encoders and query-based mask decoders."""

from vxf.tensor import Tensor, no_grad, precision, set_default_dtype

__all__ = ["Tensor", "no_grad", "precision", "set_default_dtype"]
__version__ = "0.1.0"
