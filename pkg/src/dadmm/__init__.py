"""Delay-aware consensus ADMM for multi-robot trajectory optimization and MPC."""

__version__ = "0.1.0"
