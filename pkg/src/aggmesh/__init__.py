"""Single-image mesh regression with an image encoder, a nested aggregation
grid and a Chebyshev graph decoder, written on numpy and scipy."""

__version__ = "0.1.0"
