"""Few-shot sound recognition with attentional similarity."""

__version__ = "0.1.0"
