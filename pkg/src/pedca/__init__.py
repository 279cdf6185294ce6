"""Tabular-textual fused transformer for early pediatric cardiac-arrest risk prediction."""

__version__ = "0.1.0"
