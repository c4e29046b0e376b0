"""Toolkit for Dexdata robot datasets and the surrounding experiment/serving layers."""

__version__ = "0.1.0"
