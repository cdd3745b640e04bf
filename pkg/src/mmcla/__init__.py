"""Cognitive load classification from audio and video clips."""

__version__ = "0.1.0"
