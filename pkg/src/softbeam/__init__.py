"""Training sequence taggers through a continuous relaxation of beam search."""

__version__ = "0.1.0"
