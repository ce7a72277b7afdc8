"""Ontology-guided post-pretraining for single-cell transformer encoders."""

from __future__ import annotations

__version__ = "0.1.0"
