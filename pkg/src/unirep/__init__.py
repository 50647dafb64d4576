"""Multi-domain image classification with a shared residual backbone, written on numpy."""

__version__ = "0.1.0"
