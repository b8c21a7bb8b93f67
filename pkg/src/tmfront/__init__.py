"""Desk-scale vision front-end for OCR-free document models.

Window splitting, shifted-window encoding with zero-initialised adapters,
image and token resamplers, grounding markup and evaluation metrics.
"""

__version__ = "0.1.0"
