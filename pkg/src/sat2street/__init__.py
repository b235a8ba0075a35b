"""Cross-view satellite-to-street synthesis and retrieval."""

__version__ = "0.1.0"
