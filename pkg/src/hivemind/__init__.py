"""Scheduling reverse proxy for many concurrent LLM agents sharing one API."""

__version__ = "0.1.0"
