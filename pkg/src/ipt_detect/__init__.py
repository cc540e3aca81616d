"""Frame-level instrument playing technique detection for Guzheng recordings."""

__version__ = "0.1.0"
