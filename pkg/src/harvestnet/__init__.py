"""Adaptive multi-precision, multi-exit inference for energy-harvesting devices."""

__version__ = "0.1.0"
