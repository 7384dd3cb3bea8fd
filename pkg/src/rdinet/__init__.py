"""Robust multi-exit networks: training, attacks and adaptive inference on a numpy autodiff engine."""

__version__ = "0.1.0"
