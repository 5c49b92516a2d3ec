"""ICU Agent Benchmark."""

__version__ = "1.0.0"
