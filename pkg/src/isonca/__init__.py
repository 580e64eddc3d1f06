"""Isotropic neural cellular automata: training and simulation."""

__version__ = "0.1.0"
