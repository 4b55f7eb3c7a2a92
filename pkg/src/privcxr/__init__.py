"""Differentially private multi-label classification with privacy accounting
and subgroup fairness evaluation."""

__version__ = "0.1.0"
