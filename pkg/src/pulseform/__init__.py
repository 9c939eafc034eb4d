"""Cuff-less blood pressure estimation from PPG cycle morphology."""

__version__ = "0.1.0"
