"""Blur -> deblur -> reblur -> deblur restoration with a pseudo-blur synthesizer."""

__version__ = "0.1.0"
