"""Weakly supervised multimodal misinformation detection with manipulation and intention features."""

__version__ = "0.1.0"
