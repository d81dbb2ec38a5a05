"""Goal-oriented anisotropic hp-adaptive DG solver for 2D compressible Euler flow."""

__version__ = "0.1.0"
