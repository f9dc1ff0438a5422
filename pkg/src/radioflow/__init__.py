"""Conditional flow matching for radio map generation, on a numpy autodiff core."""

__version__ = "0.1.0"
