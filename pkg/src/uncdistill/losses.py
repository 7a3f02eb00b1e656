"""Training objectives: void-masked cross-entropy for segmentation, a
root-mean-squared-log distance for uncertainty distillation, and their
unweighted sum.

Void pixels are excluded from the segmentation term but participate in the
uncertainty term: the teacher emits an uncertainty everywhere, and matching
it on void regions is what lets the student flag out-of-domain content.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import EngineError, Tensor
from .synthdata import VOID

PROB_FLOOR = 1e-12


def segmentation_loss(probs: Tensor, labels: np.ndarray):
    """Mean over non-void pixels of -log p(true class).

    labels: (B, H, W) ints in {0..C-1} or VOID. Returns (loss, counted)
    where counted is the number of non-void pixels; an all-void batch gives
    a zero loss and counted == 0.
    """
    b, c, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise EngineError(
            f"segmentation_loss: labels {labels.shape} do not match probs {probs.shape}")
    valid = labels != VOID
    if np.any((labels >= c) & valid) or np.any(labels < 0):
        bad = labels[((labels >= c) & valid) | (labels < 0)][0]
        raise EngineError(
            f"segmentation_loss: label {bad} outside 0..{c - 1} plus void")
    counted = int(valid.sum())
    if counted == 0:
        return ad.scalar(0.0, dtype=probs.dtype), 0
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    bb, yy, xx = np.nonzero(valid)
    onehot[bb, labels[valid], yy, xx] = 1.0
    picked = ad.mul(ad.log(ad.clamp_min(probs, PROB_FLOOR)), Tensor(onehot))
    return ad.scale(ad.sum_over(picked), -1.0 / counted), counted


def uncertainty_loss(student_unc: Tensor, teacher_unc: Tensor) -> Tensor:
    """Per-image sqrt(mean((log1p(z) - log1p(q))^2)), averaged over the batch."""
    if student_unc.shape != teacher_unc.shape:
        raise EngineError(
            f"uncertainty_loss: shapes differ, {student_unc.shape} vs {teacher_unc.shape}")
    if np.any(student_unc.data < 0) or np.any(teacher_unc.data < 0):
        raise EngineError("uncertainty_loss: inputs must be >= 0")
    diff = ad.sub(ad.log1p(teacher_unc), ad.log1p(student_unc))
    per_image = ad.sqrt(ad.mean_over(ad.mul(diff, diff), axes=(1, 2, 3)))
    return ad.mean_over(per_image, axes=(0,))


def total_loss(probs: Tensor, labels: np.ndarray, student_unc: Tensor,
               teacher_unc: Tensor):
    """Segmentation loss plus uncertainty loss, no weighting knob."""
    seg, counted = segmentation_loss(probs, labels)
    unc = uncertainty_loss(student_unc, teacher_unc)
    return ad.add(seg, unc), seg, unc, counted
