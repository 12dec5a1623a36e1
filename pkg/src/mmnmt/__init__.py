"""Multimodal NMT workbench: doubly-attentive cGRU decoder with soft, hard and local image attention."""
__version__ = "0.1.0"
