"""Toolkit for building, reviewing, and evaluating CWE detectors for Python code."""

__version__ = "0.1.0"
