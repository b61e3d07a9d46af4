"""mixopt: influence-guided optimization of multi-domain data mixtures."""

from . import influence, linalg, loop, mixture, model, oracle  # noqa: F401

__all__ = ["influence", "linalg", "loop", "mixture", "model", "oracle"]
__version__ = "0.1.0"
