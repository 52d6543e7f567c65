"""Adaptive chi-square FDI detection workbench for discrete LTI control loops."""

__version__ = "0.1.0"
