"""Services module."""

