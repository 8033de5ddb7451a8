"""Graph-partitioned training and search for dyadic embedding retrieval."""

__version__ = "0.1.0"
