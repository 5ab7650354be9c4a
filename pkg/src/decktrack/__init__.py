"""Deck-plane asset pose estimation and a synthetic evaluation harness."""

__version__ = "0.1.0"
