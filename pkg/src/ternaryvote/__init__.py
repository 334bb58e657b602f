"""Differentially private, ternary-compressed, majority-vote distributed SGD."""

__version__ = "0.1.0"
