"""Simulated 3D-printer attacks and a telemetry-log intrusion detector."""

__version__ = "0.1.0"
