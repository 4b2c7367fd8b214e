"""Simulation and analysis toolkit for parametrically modulated transmon gates."""

__version__ = "0.1.0"
