"""Transfer attacks on miniature vision transformers with hand-derived gradients."""

__version__ = "0.1.0"
