"""Stem-centric global localization for forest environments."""

__version__ = "0.1.0"
