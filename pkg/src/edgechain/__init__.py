"""Blockchain-anchored index authentication for edge/fog surveillance metadata."""

__version__ = "0.1.0"
