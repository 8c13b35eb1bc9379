"""Whitelisting video pipeline: per-class encrypted composable streams."""

__version__ = "0.1.0"
