"""Query-token neural audio codec with frozen semantic-prior RVQ."""

__version__ = "0.1.0"
