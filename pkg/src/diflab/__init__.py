"""Discretely indexed flows: exact-density stochastic transports for VI and density estimation."""

__version__ = "0.1.0"
