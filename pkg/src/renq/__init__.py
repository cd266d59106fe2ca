"""Ensembles of distributional Q-learners with auxiliary tasks, desk-scale pixel
environments and a bias / variance / covariance laboratory."""

__version__ = "0.1.0"
