"""Local energy and power of open volumes in many-particle quantum systems."""

__version__ = "0.1.0"
