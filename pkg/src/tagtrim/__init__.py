"""tagtrim: tag-aware transformer for keep/drop classification of query tokens."""

__version__ = "0.1.0"
