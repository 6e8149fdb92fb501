"""Enriched hotel embeddings: click sessions fused with amenity and geo attributes."""

__version__ = "0.1.0"
