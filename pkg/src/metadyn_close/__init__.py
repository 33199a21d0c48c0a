"""Metadynamics collective-variable engine with close-structure MSD approximation."""

__version__ = "0.1.0"
