"""Reasoning segmentation at desk scale: grounded chat plus per-slot masks."""

__version__ = "0.1.0"
