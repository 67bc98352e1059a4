"""Tri-modal 3D visual grounding: a frozen shared encoder with adapters, 2D-3D
feature recovery and fusion, and a set-prediction grounding head."""

__version__ = "0.1.0"
