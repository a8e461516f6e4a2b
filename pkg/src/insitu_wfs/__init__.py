"""Simulated in-situ wavefront correction through Hadamard and canonical bases."""

__version__ = "0.1.0"
