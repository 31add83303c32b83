"""Listening-log analytics: session embeddings, taste metrics, panel estimation."""

__version__ = "0.1.0"
