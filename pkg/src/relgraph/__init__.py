"""Relational graph network for question answering over a KG fused with documents."""

__version__ = "0.1.0"
