"""Graph-transformer drug response prediction with attention-based interpretation."""

__version__ = "0.1.0"
