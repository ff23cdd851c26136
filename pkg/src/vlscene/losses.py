"""Scene-completion training objective and evaluation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .view import CameraModel

IGNORE = 255
LOG_FLOOR = 1e-12
PART_NAMES = ("l_sem_scal", "l_geo_scal", "l_ce", "l_depth", "l_kd_feat", "l_kd_logits")


@dataclass
class LabelGrid:
    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise ShapeError(f"label grid must be 3-D, got {self.labels.shape}")
        bad = (self.labels != IGNORE) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise ValueError(f"labels outside [0, {self.num_classes - 1}] and not {IGNORE}")


@dataclass
class LossWeights:
    ssc: float = 1.0
    kd: float = 1.0
    sem_scal: float = 1.0
    geo_scal: float = 1.0
    ce: float = 1.0
    depth: float = 1.0
    kd_feat: float = 1.0
    kd_logits: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


def _flat_valid(logits: Tensor, labels: np.ndarray):
    n_cls = logits.shape[0]
    if logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    flat = labels.reshape(-1)
    valid = np.nonzero(flat != IGNORE)[0]
    if valid.size == 0:
        raise ValueError("no evaluable voxels: every label is ignored")
    probs = T.softmax(T.take(T.reshape(logits, (n_cls, -1)), valid, axis=1), axis=0)
    return probs, flat[valid]


def _affinity(probs: Tensor, target: np.ndarray, classes: Iterable[int]) -> Tensor:
    """Mean over present classes of -(log precision + log recall + log specificity)."""
    terms = []
    for c in classes:
        is_c = target == c
        if not is_c.any():
            continue
        p = probs[c]
        hit = T.sum_(p * is_c.astype(p.dtype))
        loss = -T.log(hit / T.sum_(p)) - T.log(hit * (1.0 / is_c.sum()))
        n_neg = int((~is_c).sum())
        if n_neg:
            spec = T.sum_((1.0 - p) * (~is_c).astype(p.dtype)) * (1.0 / n_neg)
            loss = loss - T.log(spec)
        terms.append(loss)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def scal_loss_sem(logits: Tensor, gt: LabelGrid | np.ndarray) -> Tensor:
    labels = gt.labels if isinstance(gt, LabelGrid) else np.asarray(gt)
    probs, target = _flat_valid(logits, labels)
    return _affinity(probs, target, range(logits.shape[0]))


def scal_loss_geo(logits: Tensor, gt: LabelGrid | np.ndarray) -> Tensor:
    """Affinity loss on the empty/occupied projection (occupied = 1 - p_empty)."""
    labels = gt.labels if isinstance(gt, LabelGrid) else np.asarray(gt)
    probs, target = _flat_valid(logits, labels)
    empty = probs[0:1]
    binary = T.concat([empty, 1.0 - empty], axis=0)
    return _affinity(binary, (target != 0).astype(np.int64), (0, 1))


def ce_loss(logits: Tensor, gt: LabelGrid | np.ndarray, class_weights=None) -> Tensor:
    labels = gt.labels if isinstance(gt, LabelGrid) else np.asarray(gt)
    return T.hard_cross_entropy(logits, labels, IGNORE, axis=0, class_weights=class_weights)


def depth_targets(gt_depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Nearest depth-bin index per pixel, -1 for invalid (zero) depth."""
    centers = np.array(cam.depth_bins)
    idx = np.abs(gt_depth[..., None] - centers).argmin(axis=-1)
    return np.where(gt_depth > 0, idx, -1)


def depth_loss(depth: Tensor, gt_depth: np.ndarray, cam: CameraModel, soft: bool = False) -> Tensor:
    """Cross entropy between the predicted bin distribution and the ground-truth bin.

    With ``soft`` the target splits linearly between the two bracketing bins.
    """
    gt_depth = np.asarray(gt_depth)
    if depth.shape != (cam.num_bins, *gt_depth.shape):
        raise ShapeError(f"depth {depth.shape} does not match {cam.num_bins} bins x {gt_depth.shape}")
    valid = gt_depth > 0
    if not valid.any():
        raise ValueError("depth_loss: no valid depth pixels")
    n_bins = cam.num_bins
    target = np.zeros(depth.shape, dtype=depth.dtype)
    rows, cols = np.nonzero(valid)
    if soft:
        centers = np.array(cam.depth_bins)
        z = np.clip(gt_depth[valid], centers[0], centers[-1])
        hi = np.clip(np.searchsorted(centers, z), 1, n_bins - 1)
        lo = hi - 1
        frac = (z - centers[lo]) / (centers[hi] - centers[lo])
        target[lo, rows, cols] = 1.0 - frac
        target[hi, rows, cols] += frac
    else:
        target[depth_targets(gt_depth, cam)[valid], rows, cols] = 1.0
    logp = T.log(depth, floor=LOG_FLOOR)
    return -T.sum_(logp * target) * (1.0 / rows.size)


def total_loss(parts: Mapping[str, Tensor | float], w: LossWeights) -> Tensor | float:
    """``ssc * (sem + geo + ce + depth) + kd * (feat + logits)`` with per-term sub-weights."""
    for name in PART_NAMES:
        if name not in parts:
            raise KeyError(f"missing loss part {name}")
        v = parts[name]
        if not np.all(np.isfinite(v.data if isinstance(v, Tensor) else v)):
            raise T.NonFiniteError(f"loss part {name} is not finite")
    ssc = (w.sem_scal * parts["l_sem_scal"] + w.geo_scal * parts["l_geo_scal"]
           + w.ce * parts["l_ce"] + w.depth * parts["l_depth"])
    kd = w.kd_feat * parts["l_kd_feat"] + w.kd_logits * parts["l_kd_logits"]
    return w.ssc * ssc + w.kd * kd


# -- metrics ----------------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts over voxels whose ground truth is not ignored."""
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    keep = gt != IGNORE
    return np.bincount(gt[keep] * num_classes + pred[keep],
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


@dataclass
class RangeMetrics:
    cutoff: float
    confusion: np.ndarray
    count_absent_as_zero: bool = False
    iou: dict = field(init=False)
    miou: float = field(init=False)
    occ_iou: float = field(init=False)
    precision: float = field(init=False)
    recall: float = field(init=False)

    def __post_init__(self):
        cm = self.confusion
        n = cm.shape[0]
        self.iou = {}
        for c in range(1, n):
            tp = cm[c, c]
            denom = cm[c, :].sum() + cm[:, c].sum() - tp
            if denom == 0 and not self.count_absent_as_zero:
                continue
            self.iou[c] = _ratio(tp, denom)
        self.miou = float(np.mean(list(self.iou.values()))) if self.iou else 0.0
        occ_tp = cm[1:, 1:].sum()
        occ_fp = cm[0, 1:].sum()
        occ_fn = cm[1:, 0].sum()
        self.occ_iou = _ratio(occ_tp, occ_tp + occ_fp + occ_fn)
        self.precision = _ratio(occ_tp, occ_tp + occ_fp)
        self.recall = _ratio(occ_tp, occ_tp + occ_fn)


@dataclass
class MetricsReport:
    ranges: list[RangeMetrics]
    scene_id: str = "aggregate"

    def at(self, cutoff: float) -> RangeMetrics:
        for r in self.ranges:
            if r.cutoff == cutoff:
                return r
        raise KeyError(cutoff)

    @property
    def full(self) -> RangeMetrics:
        return max(self.ranges, key=lambda r: r.cutoff)

    def to_record(self) -> dict:
        return {
            "scene": self.scene_id,
            "ranges": [{"range": r.cutoff, "miou": r.miou, "iou": r.occ_iou, "precision": r.precision,
                        "recall": r.recall, "class_iou": {str(k): v for k, v in r.iou.items()},
                        "confusion": r.confusion.tolist()} for r in self.ranges],
        }


def range_mask(shape, cutoff: float, axis: int = 0) -> np.ndarray:
    """Voxels within the first ``cutoff`` fraction of the depth axis."""
    n = shape[axis]
    keep = int(np.ceil(cutoff * n - 1e-9))
    mask = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(0, keep)
    mask[tuple(sl)] = True
    return mask


def range_confusions(pred: np.ndarray, gt: np.ndarray, num_classes: int, ranges) -> list[np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction extents {pred.shape} differ from ground truth {gt.shape}")
    out = []
    for r in ranges:
        m = range_mask(gt.shape, r)
        out.append(confusion_matrix(pred[m], gt[m], num_classes))
    return out


def evaluate(pred: LabelGrid | np.ndarray, gt: LabelGrid | np.ndarray, ranges=(1.0,),
             num_classes: int | None = None, count_absent_as_zero: bool = False,
             scene_id: str = "aggregate") -> MetricsReport:
    p = pred.labels if isinstance(pred, LabelGrid) else np.asarray(pred)
    g = gt.labels if isinstance(gt, LabelGrid) else np.asarray(gt)
    if num_classes is None:
        num_classes = gt.num_classes if isinstance(gt, LabelGrid) else int(max(p.max(), g[g != IGNORE].max(initial=0))) + 1
    if p.shape != g.shape:
        raise ShapeError(f"prediction extents {p.shape} differ from ground truth {g.shape}")
    if not (g != IGNORE).any():
        raise ValueError("no evaluable voxels")
    cms = range_confusions(p, g, num_classes, ranges)
    return MetricsReport([RangeMetrics(r, cm, count_absent_as_zero) for r, cm in zip(ranges, cms)], scene_id)


def pool_reports(reports: list[MetricsReport], count_absent_as_zero: bool = False) -> MetricsReport:
    """Aggregate by summing confusion counts per range."""
    cutoffs = [r.cutoff for r in reports[0].ranges]
    pooled = []
    for i, cut in enumerate(cutoffs):
        cm = sum(rep.ranges[i].confusion for rep in reports)
        pooled.append(RangeMetrics(cut, cm, count_absent_as_zero))
    return MetricsReport(pooled, "aggregate")


def write_jsonl(reports: list[MetricsReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")


def write_csv(report: MetricsReport, path: str | Path, class_names=()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["range", "class", "IoU"])
        for r in report.ranges:
            for c, v in sorted(r.iou.items()):
                name = class_names[c] if c < len(class_names) else str(c)
                w.writerow([r.cutoff, name, f"{v:.6f}"])
            w.writerow([r.cutoff, "mIoU", f"{r.miou:.6f}"])
            w.writerow([r.cutoff, "occupancy_IoU", f"{r.occ_iou:.6f}"])
            w.writerow([r.cutoff, "precision", f"{r.precision:.6f}"])
            w.writerow([r.cutoff, "recall", f"{r.recall:.6f}"])
