"""Assistive-perception pipeline components with pluggable inference backends."""

__version__ = "0.1.0"
