"""Residual-stream decomposition and cross-pattern re-composition for few-shot segmentation."""

__version__ = "0.1.0"
