"""Mixing by transport noise: spectra, Monte Carlo, orbit covers and a 2-D Euler solver."""
from .kernels import BACKEND

__version__ = "0.1.0"
