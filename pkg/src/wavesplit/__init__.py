"""Point-source decomposition of sound fields from spherical microphone arrays.

A separator network splits a two-source mixture into per-source pressures, a
localizer network regresses each source position from its spatial covariance,
and least squares recovers the complex amplitudes.  A grid dictionary with
orthogonal matching pursuit is included as a reference method.
"""

from .acoustics import MicArray, PointSource, Wavenumber, add_noise, green, synthesize, tdesign_64
from .pipeline import Decomposition, decompose, estimate_amplitudes, reconstruct
from .sparse import build_grid, omp, sparse_decompose

__version__ = "0.1.0"

__all__ = [
    "Decomposition",
    "MicArray",
    "PointSource",
    "Wavenumber",
    "add_noise",
    "build_grid",
    "decompose",
    "estimate_amplitudes",
    "green",
    "omp",
    "reconstruct",
    "sparse_decompose",
    "synthesize",
    "tdesign_64",
]
