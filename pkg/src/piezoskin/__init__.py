"""Simulation and analysis toolkit for piezoresistive tactile skins."""

__version__ = "0.1.0"
