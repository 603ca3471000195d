"""Guided policy search, CEM and SAC for desk-scale autonomous driving."""

__version__ = "0.1.0"
