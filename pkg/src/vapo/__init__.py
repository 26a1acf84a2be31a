"""Variational potential-flow energy models for desk-scale generative modelling."""

__version__ = "0.1.0"
