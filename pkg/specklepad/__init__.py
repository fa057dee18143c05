"""
Patch-based fingerprint presentation attack detection on laser speckle
captures, with a small numpy network engine
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
