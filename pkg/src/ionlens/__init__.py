"""Simulation toolkit for a compact ion-optical detector below an atom chip."""

__version__ = "0.1.0"
