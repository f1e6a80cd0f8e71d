"""Desk-scale semi-supervised CTC lab: iterative pseudo-labelling with a top-N averaged teacher."""

__version__ = "0.1.0"
