"""Sparse mixture-of-experts lab: routing variants, hand-derived gradients,
and probes of router/expert geometry."""
__version__ = "0.1.0"
