"""Spectral Galerkin simulation of compressible Navier-Stokes with transport noise."""

__version__ = "0.1.0"
