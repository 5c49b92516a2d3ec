"""API module."""

