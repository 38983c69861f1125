"""Self-supervised traversability estimation by one-class anomaly detection."""

__version__ = "0.1.0"
