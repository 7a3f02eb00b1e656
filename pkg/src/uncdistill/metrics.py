"""Evaluation protocols: per-class IoU, class-wise mean uncertainty,
sparsification curves, rank-based detection AUROC, binary accuracy maps,
and the inference-time benchmark.

Void ground truth never enters the confusion matrix; it does enter the
uncertainty protocols, where it marks out-of-domain content.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .synthdata import VOID


class ConfusionMatrix:
    """Streaming C x C counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != VOID
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        if p.size and (p.max() >= self.num_classes or g.max() >= self.num_classes):
            raise ValueError("class index outside confusion matrix")
        self.counts += np.bincount(
            g * self.num_classes + p,
            minlength=self.num_classes ** 2).reshape(self.num_classes, -1)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts


def iou(confusion: ConfusionMatrix):
    """Per-class TP / (TP + FP + FN) and the unweighted mean.

    Classes absent from both prediction and ground truth (zero union) are
    reported as None and excluded from the mean.
    """
    m = confusion.counts
    tp = np.diag(m).astype(np.float64)
    fn = m.sum(axis=1) - tp
    fp = m.sum(axis=0) - tp
    union = tp + fp + fn
    per_class = [float(tp[c] / union[c]) if union[c] > 0 else None
                 for c in range(confusion.num_classes)]
    present = [v for v in per_class if v is not None]
    miou = float(np.mean(present)) if present else float("nan")
    return per_class, miou


class ClassUncertainty:
    """Streaming per-class mean uncertainty over predicted-class pixels.

    All pixels count, void ground truth included: the prediction assigns a
    class everywhere and the uncertainty belongs to that class. Set
    by_ground_truth for the alternative masking (void excluded there, since
    void is not a class).
    """

    def __init__(self, num_classes: int, by_ground_truth: bool = False):
        self.num_classes = num_classes
        self.by_ground_truth = by_ground_truth
        self.sums = np.zeros(num_classes, dtype=np.float64)
        self.pixels = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, unc: np.ndarray,
               gt: np.ndarray | None = None) -> None:
        if self.by_ground_truth:
            if gt is None:
                raise ValueError("ground-truth masking needs the label map")
            mask_source = gt
            keep = gt != VOID
        else:
            mask_source = pred
            keep = np.ones(pred.shape, dtype=bool)
        sel = mask_source[keep].astype(np.int64)
        vals = unc[keep].astype(np.float64)
        self.sums += np.bincount(sel, weights=vals, minlength=self.num_classes)
        self.pixels += np.bincount(sel, minlength=self.num_classes)

    def result(self):
        """(per-class means with None for empty classes, unweighted mean)."""
        per_class = [float(self.sums[c] / self.pixels[c]) if self.pixels[c] else None
                     for c in range(self.num_classes)]
        present = [v for v in per_class if v is not None]
        munc = float(np.mean(present)) if present else float("nan")
        return per_class, munc


def class_uncertainty(pred_map: np.ndarray, uncertainty_map: np.ndarray,
                      num_classes: int):
    acc = ClassUncertainty(num_classes)
    acc.update(pred_map, uncertainty_map)
    return acc.result()


def sparsification_curve(pred_map: np.ndarray, gt: np.ndarray,
                         uncertainty_map: np.ndarray, fractions,
                         num_classes: int):
    """mIoU after dropping the most-uncertain fraction of pixels.

    Ranking is over every pixel of the evaluation set, descending by
    uncertainty with index order breaking ties; IoU on the survivors still
    excludes void. Returns [(fraction, miou), ...].
    """
    fractions = [float(f) for f in fractions]
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise ValueError(f"fraction {f} outside [0, 1)")
    pred = pred_map.reshape(-1)
    gold = gt.reshape(-1)
    unc = uncertainty_map.reshape(-1).astype(np.float64)
    if not (pred.shape == gold.shape == unc.shape):
        raise ValueError("pred, gt and uncertainty must cover the same pixels")
    # stable argsort of the negated scores = descending with index tie-break
    order = np.argsort(-unc, kind="stable")
    n = unc.size
    curve = []
    for f in fractions:
        drop = int(round(f * n))
        kept = order[drop:]
        cm = ConfusionMatrix(num_classes)
        cm.update(pred[kept], gold[kept])
        curve.append((f, iou(cm)[1]))
    return curve


def detection_auroc(scores: np.ndarray, positives: np.ndarray):
    """Rank AUROC with midrank ties: P(score_pos > score_neg) + 0.5 P(=).

    Returns None when either class is empty (the metric is undefined).
    """
    s = scores.reshape(-1).astype(np.float64)
    pos = positives.reshape(-1).astype(bool)
    if pos.shape != s.shape:
        raise ValueError(f"shape mismatch: scores {s.shape} vs positives {pos.shape}")
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    new_run = np.r_[True, sorted_s[1:] != sorted_s[:-1]]
    run_id = np.cumsum(new_run) - 1
    run_starts = np.flatnonzero(new_run)
    run_lengths = np.diff(np.r_[run_starts, s.size])
    # 1-based midrank of a tie run of length L starting at index a
    midranks = run_starts + (run_lengths + 1) / 2.0
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = midranks[run_id]
    rank_sum = ranks[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_accuracy_map(pred_map: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """uint8 mask: 255 (white) where the prediction is wrong or gt is void."""
    if pred_map.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred_map.shape} vs gt {gt.shape}")
    wrong = (pred_map != gt) | (gt == VOID)
    return np.where(wrong, 255, 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# wall-clock benchmark

@dataclass
class BenchReport:
    runs: int
    warmup: int
    baseline_ms: tuple    # (median, std)
    teacher_ms: tuple
    student_ms: tuple
    teacher_over_student: float
    student_over_baseline: float


def _time_calls(fn, runs: int, warmup: int) -> tuple:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return float(np.median(arr)), float(arr.std())


def bench_inference(student, ensemble, image: np.ndarray, runs: int = 25,
                    warmup: int = 3) -> BenchReport:
    """Per-image forward timings: single member, full teacher, dual-head
    student. Medians are robust to scheduler noise; std is reported anyway."""
    from .ensemble import teacher_predict
    from .model import predict
    if runs < 5:
        raise ValueError(f"need at least 5 runs, got {runs}")
    batch = image[None] if image.ndim == 3 else image

    baseline = _time_calls(lambda: predict(ensemble.members[0], batch), runs, warmup)
    teacher = _time_calls(lambda: teacher_predict(ensemble, batch), runs, warmup)
    student_t = _time_calls(lambda: predict(student, batch), runs, warmup)
    return BenchReport(
        runs=runs, warmup=warmup, baseline_ms=baseline, teacher_ms=teacher,
        student_ms=student_t,
        teacher_over_student=teacher[0] / student_t[0],
        student_over_baseline=student_t[0] / baseline[0])


# ---------------------------------------------------------------------------
# aggregate report

@dataclass
class MetricReport:
    num_classes: int
    per_class_iou: list
    miou: float
    per_class_unc: list
    munc: float
    sparsification: list = field(default_factory=list)
    auroc_error: float | None = None
    auroc_ood: float | None = None
    timing: BenchReport | None = None
    param_total: int | None = None
    param_overhead: int | None = None

    def summary_dict(self) -> dict:
        d = {
            "num_classes": self.num_classes,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "per_class_uncertainty": self.per_class_unc,
            "mean_uncertainty": self.munc,
            "sparsification": [[f, m] for f, m in self.sparsification],
            "auroc_misclassification": self.auroc_error,
            "auroc_out_of_domain": self.auroc_ood,
        }
        if self.timing is not None:
            d["timing_ms"] = {
                "runs": self.timing.runs,
                "warmup_excluded": self.timing.warmup,
                "baseline": list(self.timing.baseline_ms),
                "teacher": list(self.timing.teacher_ms),
                "student": list(self.timing.student_ms),
                "teacher_over_student": self.timing.teacher_over_student,
                "student_over_baseline": self.timing.student_over_baseline,
            }
        if self.param_total is not None:
            d["param_total"] = self.param_total
            d["param_uncertainty_head_overhead"] = self.param_overhead
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2, sort_keys=True)

    def class_rows_csv(self) -> str:
        """Tables 1/2 layout: one row per class with IoU and uncertainty."""
        lines = ["class,iou,mean_uncertainty"]
        for c in range(self.num_classes):
            i = self.per_class_iou[c]
            u = self.per_class_unc[c]
            lines.append(f"{c},{'' if i is None else f'{i:.6f}'},"
                         f"{'' if u is None else f'{u:.6f}'}")
        lines.append(f"mean,{self.miou:.6f},{self.munc:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_predictions(pred_maps: np.ndarray, gts: np.ndarray,
                         unc_maps: np.ndarray, num_classes: int,
                         fractions) -> MetricReport:
    """Assemble the quantitative protocols for one model over a test set.

    pred_maps, gts: (N, H, W); unc_maps: (N, H, W) in [0, 1].
    """
    cm = ConfusionMatrix(num_classes)
    cu = ClassUncertainty(num_classes)
    for i in range(pred_maps.shape[0]):
        cm.update(pred_maps[i], gts[i])
        cu.update(pred_maps[i], unc_maps[i])
    per_iou, miou = iou(cm)
    per_unc, munc = cu.result()
    curve = sparsification_curve(pred_maps, gts, unc_maps, fractions, num_classes)
    wrong = (pred_maps != gts) & (gts != VOID)
    correct = (pred_maps == gts) & (gts != VOID)
    auroc_err = detection_auroc(unc_maps[wrong | correct],
                                wrong[wrong | correct])
    auroc_ood = detection_auroc(unc_maps, gts == VOID)
    return MetricReport(num_classes=num_classes, per_class_iou=per_iou,
                        miou=miou, per_class_unc=per_unc, munc=munc,
                        sparsification=curve, auroc_error=auroc_err,
                        auroc_ood=auroc_ood)
