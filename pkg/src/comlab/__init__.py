"""Learn constants of motion from noisy trajectory samples."""

__version__ = "0.1.0"
