"""Perplexity versus accuracy: toy Transformers on copy and parity tasks,
self-conditioned perplexity diagnostics, and iso-perplexity analytics."""

__version__ = "0.1.0"
