"""Causal probes for planning and recall in small transformers with cross-layer transcoders."""

__version__ = "0.1.0"
