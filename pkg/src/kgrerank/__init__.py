"""Two-stage knowledge graph completion: bilinear first stage, permutation re-ranker."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
