"""Functional simulator for a NAND-SPIN in-MRAM computing architecture."""

__version__ = "0.1.0"
