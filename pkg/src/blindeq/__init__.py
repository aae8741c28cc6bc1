"""Blind non-linear channel equalization with variational autoencoders."""
from .qstats import PAM4, Constellation, MomentSequence, compute_moments, upsample_moments

__version__ = "0.1.0"

__all__ = [
    "PAM4",
    "Constellation",
    "MomentSequence",
    "compute_moments",
    "upsample_moments",
    "__version__",
]
