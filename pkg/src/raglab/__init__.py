"""Desk-scale lab for parametric retrieval augmentation."""

__version__ = "0.1.0"
