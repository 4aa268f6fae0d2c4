"""Clinical-utility evaluation of treatment regimes against the standard of care."""

__version__ = "0.1.0"
