"""Few-shot, noise-robust intent classification and slot labeling."""

__version__ = "0.1.0"
