"""Bayesian and evolutionary calibration of car-following models."""

__version__ = "0.1.0"
