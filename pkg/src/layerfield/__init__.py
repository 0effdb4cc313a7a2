"""Layered, generalizable radiance fields for sparse-view multi-human rendering."""

__version__ = "0.1.0"
