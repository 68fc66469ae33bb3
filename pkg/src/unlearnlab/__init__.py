"""Desk-scale machine-unlearning laboratory."""
__version__ = "0.1.0"
