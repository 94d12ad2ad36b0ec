"""Few-shot recognition by parsing feature maps into located parts."""

__version__ = "0.1.0"
