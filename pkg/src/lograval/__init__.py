"""Influence-function data valuation with Kronecker-factored gradient projection."""

from .errors import LograError

__version__ = "0.1.0"

__all__ = ["LograError", "__version__"]
