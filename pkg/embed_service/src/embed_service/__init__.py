"""Token- and sentence-embedding microservice."""

__version__ = "0.1.0"
