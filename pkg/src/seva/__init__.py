"""Severity-aware adaptation for dysarthric speech recognition on synthetic data."""

__version__ = "0.1.0"
