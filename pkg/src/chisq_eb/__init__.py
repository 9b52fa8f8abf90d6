"""Empirical Bayes effect-size estimation for batteries of chi-squared tests."""

__version__ = "0.1.0"
