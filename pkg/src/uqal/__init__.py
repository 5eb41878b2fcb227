"""Adversarial attacks against uncertainty quantification, at desk scale."""

__version__ = "0.1.0"
