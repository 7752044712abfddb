"""Sequence-to-label toolkit: a small encoder-decoder transformer with a
token codec for typed protein prediction targets."""

__version__ = "0.1.0"
