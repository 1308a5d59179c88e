"""Numerical laboratory for Gaussian small-ball and lower-deviation bounds."""
from __future__ import annotations

__version__ = "0.1.0"

from . import norms  # noqa: F401
