"""Per-sample normalization-statistics adaptation with an int8 partial-fusion path."""

from leantta._backend import NAME as BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
