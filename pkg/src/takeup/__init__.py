"""Attention/choice model of welfare take-up."""

__version__ = "0.1.0"
