"""Closed-loop auditory sleep-induction engine."""

__version__ = "0.1.0"
