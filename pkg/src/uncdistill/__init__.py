"""Uncertainty distillation for semantic segmentation on synthetic scenes.

An ensemble of independently seeded segmentation models acts as the teacher;
its per-pixel predictive uncertainty (spread of member probabilities at the
predicted class) is distilled into a single dual-head student that emits a
segmentation map and an uncertainty map in one forward pass. Everything runs
on a self-contained numpy autodiff engine.
"""

from . import (autodiff, checkpoint, ensemble, gradcheck, losses, metrics,
               model, netpbm, optim, synthdata, training)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "checkpoint", "ensemble", "gradcheck", "losses", "metrics",
    "model", "netpbm", "optim", "synthdata", "training", "__version__",
]
