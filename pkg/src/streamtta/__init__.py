"""Streaming test-time adaptation for multichannel time-series classifiers."""

__version__ = "0.1.0"
