"""Inference-time activation refinement.

Two mechanisms, composable into one pipeline:

* split & unite — split the image about activation mass centers, infer per
  patch, and merge by taking the max over overlapping regions;
* iterative inference — repeatedly erase high-activation regions with the
  original image's mean color and re-infer, summing the per-iteration maps
  until new activation falls below a fraction of the image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backend import ClassifierHandle, class_conditional_map
from .coretypes import (MIN_PATCH, ImageTensor, Rect, ResponseMap, SplitSpec,
                        normalize)
from .errors import ContractError, DimensionError, MergeCoverageError, SplitDegenerateError


@dataclass(frozen=True)
class RefinementConfig:
    """Knobs for iterative inference; defaults follow the reference setup."""

    erase_threshold: float = 0.7
    stop_fraction: float = 0.01
    max_iterations: int = 8
    activation_floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.erase_threshold <= 1.0:
            raise ContractError(f"erase_threshold must be in (0, 1], got {self.erase_threshold}")
        if not 0.0 < self.stop_fraction < 1.0:
            raise ContractError(f"stop_fraction must be in (0, 1), got {self.stop_fraction}")
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be at least 1")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    erased_pixels: int
    new_activated_pixels: int
    accumulated_snapshot: ResponseMap


@dataclass(frozen=True)
class IterationTrace:
    records: Tuple[IterationRecord, ...]
    stop_reason: str  # "converged" | "iteration-cap"
    note: str = ""


@dataclass(frozen=True)
class PipelineResult:
    maps: Dict[int, ResponseMap]
    traces: Dict[int, Tuple[IterationTrace, ...]]
    baseline_maps: Dict[int, ResponseMap]
    split_specs: Dict[int, Optional[SplitSpec]]
    used_split: bool


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def center_of_mass(m: ResponseMap) -> Tuple[float, float]:
    """Activation-weighted centroid; geometric center for an all-zero map."""
    v = m.data.astype(np.float64)
    total = v.sum()
    if total <= 0.0:
        return ((m.height - 1) / 2.0, (m.width - 1) / 2.0)
    rows = np.arange(m.height, dtype=np.float64)
    cols = np.arange(m.width, dtype=np.float64)
    r = float((v.sum(axis=1) * rows).sum() / total)
    c = float((v.sum(axis=0) * cols).sum() / total)
    return (r, c)


def _check_splittable(image_h: int, image_w: int) -> None:
    if image_h < 2 * MIN_PATCH or image_w < 2 * MIN_PATCH:
        raise SplitDegenerateError(
            f"{image_h}x{image_w} image cannot be split into patches of side >= {MIN_PATCH}")


def split_single_class(image_h: int, image_w: int,
                       center: Tuple[float, float]) -> SplitSpec:
    """Four patches meeting at the mass center, tiling the image exactly."""
    _check_splittable(image_h, image_w)
    r, c = center
    if not (0 <= r <= image_h - 1 and 0 <= c <= image_w - 1):
        raise ContractError(f"center {center} outside {image_h}x{image_w} image")
    sr = min(max(_round_half_up(r), MIN_PATCH), image_h - MIN_PATCH)
    sc = min(max(_round_half_up(c), MIN_PATCH), image_w - MIN_PATCH)
    patches = (
        Rect(0, 0, sr, sc),
        Rect(0, sc, sr, image_w - sc),
        Rect(sr, 0, image_h - sr, sc),
        Rect(sr, sc, image_h - sr, image_w - sc),
    )
    return SplitSpec(patches=patches, mode="single-class",
                     image_height=image_h, image_width=image_w)


def _expand_span(lo: int, hi: int, limit: int) -> Tuple[int, int]:
    """Grow inclusive span [lo, hi] to MIN_PATCH length, kept inside [0, limit)."""
    length = hi - lo + 1
    if length >= MIN_PATCH:
        return lo, hi
    need = MIN_PATCH - length
    lo -= need // 2
    hi = lo + MIN_PATCH - 1
    if lo < 0:
        lo, hi = 0, MIN_PATCH - 1
    if hi > limit - 1:
        hi = limit - 1
        lo = hi - MIN_PATCH + 1
    return lo, hi


def split_two_class(image_h: int, image_w: int, center_a: Tuple[float, float],
                    center_b: Tuple[float, float]) -> SplitSpec:
    """Corner patches that all retain the central rectangle spanned by two centers.

    The central rectangle is the inclusive pixel bounding box of the rounded
    centers, expanded per side to MIN_PATCH when thinner.
    """
    _check_splittable(image_h, image_w)
    for ctr in (center_a, center_b):
        if not (0 <= ctr[0] <= image_h - 1 and 0 <= ctr[1] <= image_w - 1):
            raise ContractError(f"center {ctr} outside {image_h}x{image_w} image")
    ra, ca = _round_half_up(center_a[0]), _round_half_up(center_a[1])
    rb, cb = _round_half_up(center_b[0]), _round_half_up(center_b[1])
    top, bottom = _expand_span(min(ra, rb), max(ra, rb), image_h)
    left, right = _expand_span(min(ca, cb), max(ca, cb), image_w)
    central = Rect(top, left, bottom - top + 1, right - left + 1)
    patches = (
        Rect(0, 0, central.bottom, central.right),
        Rect(0, central.left, central.bottom, image_w - central.left),
        Rect(central.top, 0, image_h - central.top, central.right),
        Rect(central.top, central.left, image_h - central.top, image_w - central.left),
    )
    return SplitSpec(patches=patches, mode="two-class",
                     image_height=image_h, image_width=image_w, overlap=central)


def split_multi_class(image_h: int, image_w: int,
                      centers: Sequence[Tuple[int, Tuple[float, float]]]
                      ) -> List[Tuple[int, SplitSpec]]:
    """Independent single-class splits, one per class; used only for that class."""
    if len(centers) < 3:
        raise ContractError(f"multi-class split needs >= 3 centers, got {len(centers)}")
    out = []
    for class_id, center in centers:
        spec = split_single_class(image_h, image_w, center)
        spec = SplitSpec(patches=spec.patches, mode="multi-class",
                         image_height=image_h, image_width=image_w)
        out.append((class_id, spec))
    return out


def merge_splits(patch_maps: Sequence[Tuple[ResponseMap, Rect]],
                 image_h: int, image_w: int) -> ResponseMap:
    """Max-merge patch maps onto the full canvas, then peak-normalize."""
    if not patch_maps:
        raise MergeCoverageError("no patches to merge")
    class_id = patch_maps[0][0].class_id
    out = np.zeros((image_h, image_w), dtype=np.float32)
    covered = np.zeros((image_h, image_w), dtype=bool)
    for m, rect in patch_maps:
        if (m.height, m.width) != (rect.height, rect.width):
            raise DimensionError(
                f"patch map {m.height}x{m.width} does not match rectangle {rect}")
        if rect.top < 0 or rect.left < 0 or rect.bottom > image_h or rect.right > image_w:
            raise DimensionError(f"rectangle {rect} outside {image_h}x{image_w} canvas")
        region = (slice(rect.top, rect.bottom), slice(rect.left, rect.right))
        np.maximum(out[region], m.data, out=out[region])
        covered[region] = True
    if not covered.all():
        raise MergeCoverageError("patch rectangles leave uncovered pixels")
    return normalize(ResponseMap(class_id=class_id, data=out, normalized=False))


def erase_high_activation(image: ImageTensor, m: ResponseMap, threshold: float,
                          fill: Optional[Tuple[float, float, float]] = None
                          ) -> Tuple[ImageTensor, np.ndarray]:
    """Replace pixels with activation >= threshold by a flat mean color.

    ``fill`` defaults to the image's own cached mean; iterative callers pass
    the original image's mean so repeated erasures stay anchored to it.
    """
    if not m.normalized:
        raise ContractError("erase threshold is defined on a normalized map")
    if (m.height, m.width) != (image.height, image.width):
        raise DimensionError(
            f"map {m.height}x{m.width} does not match image {image.height}x{image.width}")
    mask = m.data >= threshold
    if fill is None:
        fill = image.mean_color
    data = image.data.copy()
    data[mask] = np.asarray(fill, dtype=np.float32)
    return ImageTensor(data=data), mask


def iterative_infer(handle: ClassifierHandle, image: ImageTensor, class_id: int,
                    config: RefinementConfig,
                    erase_fill: Optional[Tuple[float, float, float]] = None
                    ) -> Tuple[ResponseMap, IterationTrace]:
    """Erase-and-reinfer loop accumulating normalized per-iteration maps.

    Stops once an iteration activates fewer new pixels than
    ``stop_fraction`` of the image, or at the iteration cap.
    """
    if erase_fill is None:
        erase_fill = image.mean_color
    h, w = image.height, image.width
    min_new = config.stop_fraction * h * w
    accumulated = np.zeros((h, w), dtype=np.float64)
    current = image
    active_before = 0
    records: List[IterationRecord] = []
    stop_reason = "iteration-cap"
    for index in range(1, config.max_iterations + 1):
        m = class_conditional_map(handle, current, class_id)
        accumulated += m.data
        active_now = int((accumulated > config.activation_floor).sum())
        new_active = active_now - active_before
        erased_image, mask = erase_high_activation(current, m, config.erase_threshold,
                                                   fill=erase_fill)
        snapshot = ResponseMap(class_id=class_id,
                               data=accumulated.astype(np.float32), normalized=False)
        records.append(IterationRecord(index=index, erased_pixels=int(mask.sum()),
                                       new_activated_pixels=new_active,
                                       accumulated_snapshot=snapshot))
        if new_active < min_new:
            stop_reason = "converged"
            break
        current = erased_image
        active_before = active_now
    final = normalize(ResponseMap(class_id=class_id,
                                  data=accumulated.astype(np.float32), normalized=False))
    return final, IterationTrace(records=tuple(records), stop_reason=stop_reason)


def run_pipeline(handle: ClassifierHandle, image: ImageTensor,
                 present: Sequence[int], config: RefinementConfig,
                 use_split: bool = True) -> PipelineResult:
    """Split & unite plus iterative inference for every present class.

    Deterministic: classes and patches are processed in a fixed order, and
    merging is a pixelwise max, so scheduling cannot change the result.
    """
    if not present:
        raise ContractError("present_classes must be nonempty")
    baseline: Dict[int, ResponseMap] = {}
    centers: Dict[int, Tuple[float, float]] = {}
    for class_id in present:
        m = class_conditional_map(handle, image, class_id)
        baseline[class_id] = m
        centers[class_id] = center_of_mass(m)

    h, w = image.height, image.width
    specs: Dict[int, Optional[SplitSpec]] = {c: None for c in present}
    note = ""
    if use_split:
        try:
            if len(present) == 1:
                only = present[0]
                specs[only] = split_single_class(h, w, centers[only])
            elif len(present) == 2:
                a, b = present
                spec = split_two_class(h, w, centers[a], centers[b])
                specs[a] = spec
                specs[b] = spec
            else:
                pairs = [(c, centers[c]) for c in present]
                for class_id, spec in split_multi_class(h, w, pairs):
                    specs[class_id] = spec
        except SplitDegenerateError:
            specs = {c: None for c in present}
            note = "split degenerate; fell back to whole-image inference"

    maps: Dict[int, ResponseMap] = {}
    traces: Dict[int, Tuple[IterationTrace, ...]] = {}
    for class_id in present:
        spec = specs[class_id]
        if spec is None:
            final, trace = iterative_infer(handle, image, class_id, config,
                                           erase_fill=image.mean_color)
            if note:
                trace = IterationTrace(records=trace.records,
                                       stop_reason=trace.stop_reason, note=note)
            maps[class_id] = final
            traces[class_id] = (trace,)
            continue
        patch_maps: List[Tuple[ResponseMap, Rect]] = []
        patch_traces: List[IterationTrace] = []
        for rect in spec.patches:
            crop = image.crop(rect)
            m, trace = iterative_infer(handle, crop, class_id, config,
                                       erase_fill=image.mean_color)
            patch_maps.append((m, rect))
            patch_traces.append(trace)
        maps[class_id] = merge_splits(patch_maps, h, w)
        traces[class_id] = tuple(patch_traces)
    return PipelineResult(maps=maps, traces=traces, baseline_maps=baseline,
                          split_specs=specs, used_split=use_split and note == "")
