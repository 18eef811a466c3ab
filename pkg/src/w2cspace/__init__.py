"""Word-context coupled semantic space pipeline."""

__version__ = "0.1.0"
