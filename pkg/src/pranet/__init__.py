"""Point relation-aware networks for point-cloud analysis on a numpy autodiff engine."""

__version__ = "0.1.0"
