"""Patch-level histology classification pipeline: canonical region
orientation and tiling, pluggable per-patch descriptors, bag-of-visual-words
feature selection, a shallow MLP classifier, and a cross-validated
evaluation harness."""

__version__ = "0.1.0"

from .labels import Label  # noqa: F401
