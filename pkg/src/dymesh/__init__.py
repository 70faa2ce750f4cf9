"""Dynamic mesh trajectory autoencoding and text-conditioned animation."""

__version__ = "0.1.0"
