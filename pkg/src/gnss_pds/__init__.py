"""Opportunistic-source consistency checking for GNSS spoofing detection."""

__version__ = "0.1.0"
