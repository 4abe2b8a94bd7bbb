"""Homogenization toolkit for periodic nonlocal convolution-type operators."""

__version__ = "0.1.0"
