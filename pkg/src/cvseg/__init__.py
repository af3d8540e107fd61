"""Cross-view low-rank segmentation toolkit."""

from .autograd import Tape, Tensor

__all__ = ["Tape", "Tensor"]
__version__ = "0.1.0"
