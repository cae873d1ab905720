"""Multi-subject training-data construction with pluggable model backends."""

__version__ = "0.1.0"
