"""Variational potential-flow generative modeling at low dimension."""

__version__ = "0.1.0"
