"""Seesaw-block face verification networks on a small numpy engine."""

__version__ = "0.1.0"
