"""Core module."""

from app.core.config import settings

__all__ = ["settings"]
