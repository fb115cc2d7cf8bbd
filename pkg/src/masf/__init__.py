"""Multi-scale small-object detector on a numpy tensor engine."""

__version__ = "0.1.0"
