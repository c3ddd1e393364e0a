"""Environment-aware indoor path loss fitting and shadow-fading analysis."""

__version__ = "0.1.0"
