"""Identification of a space-time source in a parabolic Robin problem from boundary data."""

__version__ = "0.1.0"
