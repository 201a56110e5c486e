"""Identity embeddings for individual animals via triplet loss."""
__version__ = "0.1.0"
