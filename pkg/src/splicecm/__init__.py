"""Partially-spoofed speech corpus construction and multi-resolution spoof detection."""

__version__ = "0.1.0"

RESOLUTIONS_MS = (20, 40, 80, 160, 320, 640)
