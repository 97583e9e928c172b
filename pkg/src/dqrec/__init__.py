"""Semantic-id quantization with a decomposed SVD basis, plus an augmented dual-tower recommender."""

__version__ = "0.1.0"
