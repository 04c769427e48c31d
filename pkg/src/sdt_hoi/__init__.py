"""Distance-aware interaction recognition over detected human and object tokens."""

__version__ = "0.1.0"
