"""Camera-aware label refinement laboratory for embedding-level re-identification."""

__version__ = "0.1.0"
