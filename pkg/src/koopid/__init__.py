"""Identification of lifted Koopman models with inputs and innovation noise."""

__version__ = "0.1.0"
