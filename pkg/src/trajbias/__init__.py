"""Adversarial recurrent autoencoders for trajectory-bias-compensated patient stratification."""

__version__ = "0.1.0"
