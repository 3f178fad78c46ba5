"""Empirical LTE link-layer model, fitting tools, per-UE queue emulator and probe tool."""

__version__ = "0.1.0"
