"""Learned Takagi-Sugeno vehicle modeling with predictive control and
moving-horizon estimation."""

__version__ = "0.1.0"
