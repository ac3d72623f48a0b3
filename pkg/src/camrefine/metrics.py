"""Segmentation evaluation: confusion matrices, mIoU, activation recall,
per-class-count breakdowns, and the conflict temperature."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .coretypes import IGNORE, LabelMap, ResponseMap, SaliencyMap
from .errors import ContractError, DimensionError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """(C+1)x(C+1) integer counts; rows = ground truth, cols = prediction."""

    classes: int  # C+1, background included
    counts: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.classes, self.classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.classes, self.classes):
                raise DimensionError(
                    f"counts shape {self.counts.shape} != ({self.classes}, {self.classes})")
            if (self.counts < 0).any():
                raise ContractError("confusion counts must be non-negative")

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(classes=self.classes, counts=self.counts.copy())

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise DimensionError("cannot add confusion matrices of different sizes")
        return ConfusionMatrix(classes=self.classes, counts=self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: LabelMap, gt: LabelMap) -> ConfusionMatrix:
    """Add one image's pixels into the matrix; ignore-index pixels are skipped."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise DimensionError(
            f"prediction {pred.height}x{pred.width} does not match ground truth "
            f"{gt.height}x{gt.width}")
    n = cm.classes
    p = pred.data.reshape(-1)
    g = gt.data.reshape(-1)
    keep = g != IGNORE
    p = p[keep]
    g = g[keep]
    if ((p < 0) | (p >= n)).any() or ((g < 0) | (g >= n)).any():
        raise ContractError(f"label outside 0..{n - 1} fed to a {n}-class matrix")
    binned = np.bincount(g.astype(np.int64) * n + p, minlength=n * n)
    return ConfusionMatrix(classes=n, counts=cm.counts + binned.reshape(n, n))


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    """IoU per class; None where the class appears in neither prediction nor truth."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    out: List[Optional[float]] = []
    for d, dn in zip(diag, denom.astype(np.float64)):
        out.append(None if dn == 0 else float(d / dn))
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in prediction or ground truth."""
    if cm.total() == 0:
        raise UndefinedMetricError("confusion matrix is empty")
    ious = [v for v in per_class_iou(cm) if v is not None]
    if not ious:
        raise UndefinedMetricError("every class is absent from both prediction and truth")
    return float(sum(ious) / len(ious))


def activated_recall_counts(maps: Mapping[int, ResponseMap], gt: LabelMap) -> Tuple[int, int]:
    """(covered, total) foreground ground-truth pixels; covered = map value > 0."""
    hits = 0
    total = 0
    for class_id, m in maps.items():
        if (m.height, m.width) != (gt.height, gt.width):
            raise DimensionError(
                f"map for class {class_id} is {m.height}x{m.width}, "
                f"ground truth is {gt.height}x{gt.width}")
        fg = gt.data == class_id
        total += int(fg.sum())
        hits += int((fg & (m.data > 0)).sum())
    # foreground classes without a supplied map count as uncovered
    for class_id in np.unique(gt.data):
        if class_id in (0, IGNORE) or int(class_id) in maps:
            continue
        total += int((gt.data == class_id).sum())
    return hits, total


def activated_recall(maps: Mapping[int, ResponseMap], gt: LabelMap) -> float:
    """Fraction of foreground ground-truth pixels with any positive activation."""
    hits, total = activated_recall_counts(maps, gt)
    if total == 0:
        raise UndefinedMetricError("ground truth has no foreground pixels")
    return hits / total


_BUCKETS = ("1", "2", "3+")


def bucket_of(class_count: int) -> str:
    if class_count <= 1:
        return "1"
    if class_count == 2:
        return "2"
    return "3+"


def breakdown_by_class_count(
    per_image: Iterable[Tuple[LabelMap, LabelMap, int]], classes: int
) -> Dict[str, Optional[float]]:
    """mIoU per {1, 2, 3+}-class bucket plus overall.

    ``per_image`` yields (prediction, ground truth, image class count);
    buckets with no images report None.
    """
    cms = {b: ConfusionMatrix(classes=classes) for b in _BUCKETS}
    overall = ConfusionMatrix(classes=classes)
    for pred, gt, count in per_image:
        b = bucket_of(count)
        cms[b] = accumulate(cms[b], pred, gt)
        overall = accumulate(overall, pred, gt)
    result: Dict[str, Optional[float]] = {}
    for b in _BUCKETS:
        result[b] = None if cms[b].total() == 0 else mean_iou(cms[b])
    result["total"] = None if overall.total() == 0 else mean_iou(overall)
    return result


def conflict_temperature(pseudo: LabelMap, saliency: SaliencyMap) -> float:
    """Two-class mean IoU between the pseudo background and the non-salient mask.

    Saliency is binarized at 0.5 (inclusive). Ignore-index pixels are
    excluded. High values mean saliency agrees with the activation-derived
    background, so a saliency loss can be trusted more.
    """
    if (pseudo.height, pseudo.width) != (saliency.height, saliency.width):
        raise DimensionError(
            f"pseudo labels {pseudo.height}x{pseudo.width} do not match saliency "
            f"{saliency.height}x{saliency.width}")
    valid = pseudo.data != IGNORE
    bg = (pseudo.data == 0) & valid
    fg = (pseudo.data != 0) & valid
    salient = (saliency.data >= 0.5) & valid
    non_salient = (~(saliency.data >= 0.5)) & valid
    ious: List[float] = []
    union_bg = int((bg | non_salient).sum())
    if union_bg:
        ious.append(int((bg & non_salient).sum()) / union_bg)
    union_fg = int((fg | salient).sum())
    if union_fg:
        ious.append(int((fg & salient).sum()) / union_fg)
    if not ious:
        raise UndefinedMetricError("no valid pixels to compare")
    return float(sum(ious) / len(ious))
