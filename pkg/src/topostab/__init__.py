"""Topologically stabilised graph classification: Rips persistence images on
hop-distance metrics feeding a GIN with a spectrally normalised fusion head."""

__version__ = "0.1.0"
