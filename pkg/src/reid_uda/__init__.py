"""Unsupervised domain adaptation for re-identification on feature embeddings."""

from .kernels import BACKEND
from .rng import RNG_ALGORITHM, Rng

__version__ = "0.1.0"
__all__ = ["BACKEND", "RNG_ALGORITHM", "Rng", "__version__"]
