"""Bias audit of clinical kidney-failure risk models on EHR-style cohorts."""

__version__ = "0.1.0"
