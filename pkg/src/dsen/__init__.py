"""Domain-specific embedding network for generalized zero-shot learning."""

__version__ = "0.1.0"
