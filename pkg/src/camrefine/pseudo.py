"""Pseudo-label generation and the best-mIoU background-threshold sweep."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple

import numpy as np

from .coretypes import LabelMap, ResponseMap
from .errors import ContractError, DimensionError
from .metrics import ConfusionMatrix, accumulate, mean_iou

# Reproducible default grid standing in for "all background thresholds".
DEFAULT_THRESHOLDS: Tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class ThresholdSweepResult:
    thresholds: Tuple[float, ...]
    miou_per_threshold: Tuple[float, ...]
    best_threshold: float
    best_miou: float

    def __post_init__(self):
        if len(self.thresholds) != len(self.miou_per_threshold):
            raise DimensionError("sweep curve lengths differ")
        if self.miou_per_threshold and abs(self.best_miou - max(self.miou_per_threshold)) > 1e-12:
            raise ContractError("best_miou must be the curve maximum")


def generate_pseudo_labels(maps: Mapping[int, ResponseMap], bg_threshold: float,
                           num_classes: int = 20) -> LabelMap:
    """Thresholded argmax over class maps with a flat background channel.

    Ties go to foreground over background, and to the lowest class index
    among foreground classes.
    """
    if not maps:
        raise ContractError("at least one class map is required")
    if not 0.0 <= bg_threshold <= 1.0:
        raise ContractError(f"bg_threshold must lie in [0, 1], got {bg_threshold}")
    class_ids = sorted(maps)
    first = maps[class_ids[0]]
    h, w = first.height, first.width
    stack = np.empty((len(class_ids), h, w), dtype=np.float32)
    for i, cid in enumerate(class_ids):
        m = maps[cid]
        if (m.height, m.width) != (h, w):
            raise DimensionError(f"map for class {cid} is {m.height}x{m.width}, expected {h}x{w}")
        if not 0 < cid <= num_classes:
            raise ContractError(f"class id {cid} outside 1..{num_classes}")
        stack[i] = m.data
    winner = stack.argmax(axis=0)  # first max wins -> lowest class index
    winner_value = np.take_along_axis(stack, winner[None], axis=0)[0]
    ids = np.asarray(class_ids, dtype=np.int32)
    labels = np.where(winner_value >= bg_threshold, ids[winner], 0).astype(np.int32)
    return LabelMap(data=labels, num_classes=num_classes)


def sweep_best_miou(maps: Mapping[int, ResponseMap], ground_truth: LabelMap,
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                    num_classes: int = 20) -> ThresholdSweepResult:
    """mIoU of generated labels against ground truth at every threshold.

    Ties on the curve resolve to the lowest threshold.
    """
    if not thresholds:
        raise ContractError("threshold list must be nonempty")
    mious = []
    for t in thresholds:
        pred = generate_pseudo_labels(maps, t, num_classes=num_classes)
        cm = accumulate(ConfusionMatrix(classes=num_classes + 1), pred, ground_truth)
        mious.append(mean_iou(cm))
    best_idx = int(np.argmax(mious))
    return ThresholdSweepResult(thresholds=tuple(float(t) for t in thresholds),
                                miou_per_threshold=tuple(mious),
                                best_threshold=float(thresholds[best_idx]),
                                best_miou=float(mious[best_idx]))
