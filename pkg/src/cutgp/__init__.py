"""Sim-to-real transfer of cutting policies through a periodic GP disturbance model."""

__version__ = "0.1.0"
