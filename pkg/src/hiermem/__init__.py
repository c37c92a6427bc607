"""Hierarchical compressor-retriever memory for decoder-only transformers."""

__version__ = "0.1.0"
