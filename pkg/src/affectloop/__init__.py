"""Hierarchical, dual-source affect controller with an auditable memory interface."""

__version__ = "0.1.0"
