"""Unrolled two-grid correction / prior-distillation network for CS-MRI."""

__version__ = "0.1.0"
