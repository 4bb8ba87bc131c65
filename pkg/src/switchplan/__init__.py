"""Layer-wise parallel strategy planning and simulation for dynamic sequence lengths."""

__version__ = "0.1.0"
