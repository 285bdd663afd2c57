"""Simulation and learning toolkit for directional selective fixed-filter
active noise control with next-frame DoA prediction."""

__version__ = "0.1.0"
