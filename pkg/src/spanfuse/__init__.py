"""Span-grid sequence labeling with LLM-derived extension labels."""

__version__ = "0.1.0"
