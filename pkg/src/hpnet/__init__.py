"""Packet-level malicious traffic classification from aligned header/payload bytes."""

__version__ = "0.1.0"
