"""MSGL-Transformer: multi-scale global-local attention for pose-based
rodent social behaviour recognition."""

__version__ = "0.1.0"
