"""Zero-shot deepfake attribution laboratory."""
__version__ = "0.1.0"
