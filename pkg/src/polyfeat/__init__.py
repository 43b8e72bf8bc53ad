"""Multi-view audio embeddings with late fusion."""

__version__ = "0.1.0"
