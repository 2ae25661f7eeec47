"""TopK gradient sparsification with error feedback: simulator and analysis."""

__version__ = "0.1.0"
