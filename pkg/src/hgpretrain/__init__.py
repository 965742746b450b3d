"""Hypergraph transformer pre-training for transfer to small clinical cohorts."""

__version__ = "0.1.0"
