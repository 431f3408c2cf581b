"""Lower-bounded matrix-valued random fields and their stochastic Galerkin
solution maps."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
