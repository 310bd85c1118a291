"""Desk-scale pull-target-to-source domain adaptation laboratory."""

__version__ = "0.1.0"
