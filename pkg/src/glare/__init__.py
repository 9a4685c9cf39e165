"""Continual self-supervised pre-training of ViT encoders through adapters,
with global, regional, and local consistency objectives."""

__version__ = "0.1.0"
