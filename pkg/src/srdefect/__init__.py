"""SR-assisted defect detection on synthetic line-space SEM imagery."""

from .core import BBox, DataError, Detection, GrayImage, Sample
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["BBox", "DataError", "Detection", "GrayImage", "Sample", "KERNEL_BACKEND", "__version__"]
