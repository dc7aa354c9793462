"""Contrastive prototypical few-shot 3D object detection on synthetic scenes."""

__version__ = "0.1.0"
