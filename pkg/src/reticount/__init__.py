"""Single-shot reticulocyte detection and counting."""

__version__ = "0.1.0"
