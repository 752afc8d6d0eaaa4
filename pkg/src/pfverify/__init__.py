"""Certified worst-case error bounds for ReLU surrogates of AC power flow."""

__version__ = "0.1.0"
