"""Invariant representation learning by decoupling style and spurious features."""
__version__ = "0.1.0"

from .estimator import IRSSClassifier  # noqa: E402

__all__ = ["IRSSClassifier", "__version__"]
