"""Attention-guided feature distillation for semantic segmentation."""

from .version import __version__

__all__ = ["__version__"]
