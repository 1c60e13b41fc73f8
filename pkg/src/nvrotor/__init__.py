"""Spin-controlled libration of a levitated nanodiamond: rates, echo protocol, oracle."""

__version__ = "0.1.0"
