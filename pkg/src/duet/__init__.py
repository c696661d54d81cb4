"""Bayesian adversarial-patch localization with calibrated exceedance tests."""

__version__ = "0.1.0"
