"""Context-conditional molecular activity prediction toolkit."""

__version__ = "0.1.0"
