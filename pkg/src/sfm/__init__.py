"""Spatial frequency modulation toolkit: aliasing analysis, attention-driven
resampling before downsampling, and triangulated demodulation."""

__version__ = "0.1.0"
