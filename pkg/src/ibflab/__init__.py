"""Numerical laboratory for isotropic Brownian flows."""

from ibflab.covmodel import IsotropicModel

__version__ = "0.1.0"

__all__ = ["IsotropicModel", "__version__"]
