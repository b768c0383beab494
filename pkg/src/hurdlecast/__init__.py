"""Semiparametric hierarchical hurdle regression for sparse count forecasting."""

__version__ = "0.1.0"
