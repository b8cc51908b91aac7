"""Multi-scale patch classification for whole-slide segmentation."""

__version__ = "0.1.0"
