"""Generalized transferable attacks: universal surrogate, sine attack and baselines."""

__version__ = "0.1.0"
