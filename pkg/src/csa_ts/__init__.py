"""Time-series classification with class-specific attention."""

__version__ = "0.1.0"
