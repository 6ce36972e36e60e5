"""Training-aware heterogeneous depth scaling for vision transformers."""

__version__ = "0.1.0"
