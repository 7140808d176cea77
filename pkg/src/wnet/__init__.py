"""W-Net white-blood-cell classifier on a small numpy deep-learning engine."""

__version__ = "0.1.0"
