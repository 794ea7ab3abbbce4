"""Numerical local-controllability analysis of control systems with
endpoint constraints, based on first- and second-order multiplier tests."""

__version__ = "0.1.0"
