"""Represent-then-aggregate playlist continuation."""

__version__ = "0.1.0"
