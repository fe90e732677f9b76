"""Periodic homogenization of SDEs driven by multiplicative alpha-stable noise."""

__version__ = "0.1.0"
