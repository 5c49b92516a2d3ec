"""Models module."""

