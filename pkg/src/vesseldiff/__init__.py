"""Diffusion-based unsupervised domain adaptation for vessel segmentation
on synthetic two-modality vascular phantoms."""

from . import diffusion, losses, metrics, ndtensor, nets, phantom, pipeline, schedule

__all__ = [
    "diffusion",
    "losses",
    "metrics",
    "ndtensor",
    "nets",
    "phantom",
    "pipeline",
    "schedule",
]

__version__ = "0.1.0"
