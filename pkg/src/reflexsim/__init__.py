"""Hierarchical evasion of dynamic obstacles for a planar wheel-legged base."""

from __future__ import annotations

__version__ = "0.1.0"
