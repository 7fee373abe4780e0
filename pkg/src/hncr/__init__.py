"""Neighbor-aggregating collaborative filtering on the Poincaré ball."""

__version__ = "0.1.0"
