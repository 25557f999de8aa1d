"""Distributed emulator of QKD networks behind the ETSI GS QKD 014 key delivery API."""

__version__ = "0.1.0"
