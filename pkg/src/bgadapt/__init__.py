"""Class-incremental segmentation with background adaptation, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: E402,F401
