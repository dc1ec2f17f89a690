"""Variational-Bayes joint channel estimation and detection for time-varying massive MIMO uplinks."""

__version__ = "0.1.0"
