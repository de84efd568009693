"""Adapter-based hotfixing of code language models, on a from-scratch numpy stack."""

__version__ = "0.1.0"
