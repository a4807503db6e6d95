"""ropetrack: multi-view rope tracking with position-based dynamics and a
differentiable Gaussian-splat renderer."""

from . import dataio, gradcheck, kernels, metrics, model, pbd, splat, synth, tracker

__version__ = "0.1.0"

__all__ = [
    "dataio",
    "gradcheck",
    "kernels",
    "metrics",
    "model",
    "pbd",
    "splat",
    "synth",
    "tracker",
    "__version__",
]
