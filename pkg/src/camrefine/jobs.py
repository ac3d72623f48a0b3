"""Batch jobs over dataset indexes: map extraction, refinement, pseudo labels,
evaluation, overlays, and the loss gradient verifier.

Per-entry failures never abort a batch; every job writes a machine-readable
``failures.json`` manifest into its output directory. Dataset label ids are
1-based; model class index c corresponds to label id c + 1.

The config digest written into tensor sidecars and reports hashes only the
semantic parameters (model, dataset, thresholds, refinement knobs) — worker
count and output paths are excluded so reruns are byte-reproducible.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import dataio, viz
from .backend import ClassifierHandle, class_conditional_map, present_classes
from .condinfer import RefinementConfig, run_pipeline
from .coretypes import ImageTensor, LabelMap, ResponseMap, SaliencyMap
from .errors import CamRefineError
from .metrics import (ConfusionMatrix, accumulate, activated_recall_counts,
                      breakdown_by_class_count, mean_iou, per_class_iou)
from .pseudo import DEFAULT_THRESHOLDS, generate_pseudo_labels
from .refineloss import PredictionTensor, total_loss


def config_digest(params: Mapping) -> str:
    """Stable hex digest over canonicalized config content."""
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class JobFailure:
    entry_id: str
    message: str


@dataclass
class JobReport:
    job: str
    config_digest: str
    processed: List[str] = field(default_factory=list)
    failures: List[JobFailure] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    output_digest: str = ""
    extra: Dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def _finish_report(report: JobReport, output_dir: str) -> JobReport:
    report.processed.sort()
    report.outputs.sort()
    report.failures.sort(key=lambda f: f.entry_id)
    lines = []
    for path in report.outputs:
        rel = os.path.relpath(path, output_dir)
        lines.append(f"{rel}:{_file_digest(path)}")
    report.output_digest = hashlib.sha256("\n".join(sorted(lines)).encode()).hexdigest()
    manifest = [{"entry_id": f.entry_id, "message": f.message} for f in report.failures]
    with open(os.path.join(output_dir, "failures.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return report


def _run_entries(entries, worker: Callable, workers: int, report: JobReport) -> None:
    """Apply ``worker`` to every entry; results land in ``report`` in entry order."""
    def safe(entry):
        try:
            return entry.image_id, worker(entry), None
        except CamRefineError as exc:
            return entry.image_id, None, str(exc)

    if workers <= 1:
        results = [safe(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(safe, entries))
    for entry_id, outputs, error in results:
        if error is not None:
            report.failures.append(JobFailure(entry_id=entry_id, message=error))
        else:
            report.processed.append(entry_id)
            report.outputs.extend(outputs)


def _entry_classes(entry: dataio.DatasetEntry, handle: ClassifierHandle,
                   image: ImageTensor) -> Tuple[int, ...]:
    """Image-level label ids, falling back to score thresholding."""
    if entry.class_ids:
        return entry.class_ids
    return tuple(c + 1 for c in present_classes(handle, image))


def _map_path(output_dir: str, entry_id: str, label_id: int) -> str:
    return os.path.join(output_dir, f"{entry_id}_{label_id}.npy")


def run_cam_job(handle: ClassifierHandle, dataset: dataio.DatasetIndex,
                output_dir: str, workers: int = 1,
                digest_params: Optional[Mapping] = None) -> JobReport:
    """Plain class-conditional maps for every (entry, present class)."""
    digest = config_digest(digest_params or {"job": "cam", "model": handle.model_path})
    os.makedirs(output_dir, exist_ok=True)
    report = JobReport(job="cam", config_digest=digest)
    for entry_id, reason in dataset.rejected:
        report.failures.append(JobFailure(entry_id=entry_id, message=reason))

    def worker(entry: dataio.DatasetEntry) -> List[str]:
        image = dataio.read_image(entry.image_path)
        outputs = []
        for label_id in _entry_classes(entry, handle, image):
            m = class_conditional_map(handle, image, label_id - 1)
            path = _map_path(output_dir, entry.image_id, label_id)
            dataio.save_response_map(m, path, config_digest=digest)
            outputs.extend([path, path + ".meta"])
        return outputs

    _run_entries(dataset.entries, worker, workers, report)
    return _finish_report(report, output_dir)


def run_infer_job(handle: ClassifierHandle, dataset: dataio.DatasetIndex,
                  output_dir: str, refinement: RefinementConfig,
                  use_split: bool = True, workers: int = 1,
                  digest_params: Optional[Mapping] = None) -> JobReport:
    """Refined maps via split & unite plus iterative inference, traces persisted."""
    digest = config_digest(digest_params or {
        "job": "infer", "model": handle.model_path,
        "erase_threshold": refinement.erase_threshold,
        "stop_fraction": refinement.stop_fraction,
        "max_iterations": refinement.max_iterations,
        "use_split": use_split,
    })
    os.makedirs(output_dir, exist_ok=True)
    trace_dir = os.path.join(output_dir, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    report = JobReport(job="infer", config_digest=digest)
    for entry_id, reason in dataset.rejected:
        report.failures.append(JobFailure(entry_id=entry_id, message=reason))

    def worker(entry: dataio.DatasetEntry) -> List[str]:
        image = dataio.read_image(entry.image_path)
        label_ids = _entry_classes(entry, handle, image)
        result = run_pipeline(handle, image, [l - 1 for l in label_ids],
                              refinement, use_split=use_split)
        outputs = []
        trace_doc: Dict = {"image_id": entry.image_id, "used_split": result.used_split,
                           "classes": {}}
        for label_id in label_ids:
            class_idx = label_id - 1
            path = _map_path(output_dir, entry.image_id, label_id)
            dataio.save_response_map(result.maps[class_idx], path, config_digest=digest)
            outputs.extend([path, path + ".meta"])
            spec = result.split_specs.get(class_idx)
            trace_doc["classes"][str(label_id)] = {
                "patches": [[r.top, r.left, r.height, r.width]
                            for r in (spec.patches if spec else [])],
                "mode": spec.mode if spec else "whole-image",
                "iterations": [
                    {
                        "stop_reason": t.stop_reason,
                        "note": t.note,
                        "records": [[rec.index, rec.erased_pixels, rec.new_activated_pixels]
                                    for rec in t.records],
                    }
                    for t in result.traces[class_idx]
                ],
            }
        trace_path = os.path.join(trace_dir, entry.image_id + ".json")
        with open(trace_path, "w", encoding="utf-8") as fh:
            json.dump(trace_doc, fh, indent=2, sort_keys=True)
        outputs.append(trace_path)
        return outputs

    _run_entries(dataset.entries, worker, workers, report)
    return _finish_report(report, output_dir)


def _load_entry_maps(maps_dir: str, entry: dataio.DatasetEntry,
                     num_classes: int) -> Dict[int, ResponseMap]:
    maps: Dict[int, ResponseMap] = {}
    for label_id in range(1, num_classes + 1):
        path = _map_path(maps_dir, entry.image_id, label_id)
        if os.path.isfile(path):
            maps[label_id] = dataio.load_response_map(path)
    if not maps:
        raise CamRefineError(f"no response maps for {entry.image_id} under {maps_dir}")
    return maps


def run_pseudo_job(maps_dir: str, dataset: dataio.DatasetIndex, bg_threshold: float,
                   output_dir: str, workers: int = 1,
                   digest_params: Optional[Mapping] = None) -> JobReport:
    """Turn stored maps into palette-PNG pseudo labels at one background threshold."""
    digest = config_digest(digest_params or {"job": "pseudo", "bg_threshold": bg_threshold})
    os.makedirs(output_dir, exist_ok=True)
    num_classes = len(dataset.class_names)
    report = JobReport(job="pseudo", config_digest=digest)
    for entry_id, reason in dataset.rejected:
        report.failures.append(JobFailure(entry_id=entry_id, message=reason))

    def worker(entry: dataio.DatasetEntry) -> List[str]:
        maps = _load_entry_maps(maps_dir, entry, num_classes)
        label = generate_pseudo_labels(maps, bg_threshold, num_classes=num_classes)
        path = os.path.join(output_dir, entry.image_id + ".png")
        dataio.write_label_png(label, path)
        return [path]

    _run_entries(dataset.entries, worker, workers, report)
    return _finish_report(report, output_dir)


def run_eval_job(maps_dir: str, dataset: dataio.DatasetIndex,
                 thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                 output_dir: Optional[str] = None, workers: int = 1,
                 digest_params: Optional[Mapping] = None) -> JobReport:
    """Dataset-level threshold sweep, activation recall, and class-count breakdown.

    The sweep accumulates one confusion matrix per threshold over all entries
    (the dataset-level best-match protocol), so the reported best mIoU is a
    property of the whole set, not a mean of per-image bests.
    """
    digest = config_digest(digest_params or {"job": "eval",
                                             "thresholds": [float(t) for t in thresholds]})
    num_classes = len(dataset.class_names)
    n_thresh = len(thresholds)
    report = JobReport(job="eval", config_digest=digest)
    for entry_id, reason in dataset.rejected:
        report.failures.append(JobFailure(entry_id=entry_id, message=reason))

    def worker(entry: dataio.DatasetEntry):
        if entry.label_path is None:
            raise CamRefineError(f"{entry.image_id}: evaluation requires ground-truth labels")
        gt = dataio.read_label_png(entry.label_path, num_classes=num_classes)
        maps = _load_entry_maps(maps_dir, entry, num_classes)
        cms = []
        for t in thresholds:
            pred = generate_pseudo_labels(maps, t, num_classes=num_classes)
            cm = accumulate(ConfusionMatrix(classes=num_classes + 1), pred, gt)
            cms.append(cm.counts)
        hits, total = activated_recall_counts(maps, gt)
        class_count = len(entry.class_ids) if entry.class_ids else len(maps)
        return cms, (hits, total), class_count, maps, gt

    def safe(entry):
        try:
            return entry.image_id, worker(entry), None
        except CamRefineError as exc:
            return entry.image_id, None, str(exc)

    if workers <= 1:
        results = [safe(e) for e in dataset.entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(safe, dataset.entries))

    sweep_counts = [np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
                    for _ in range(n_thresh)]
    recall_hits = 0
    recall_total = 0
    kept = []
    for entry_id, payload, error in results:
        if error is not None:
            report.failures.append(JobFailure(entry_id=entry_id, message=error))
            continue
        report.processed.append(entry_id)
        cms, (hits, total), class_count, maps, gt = payload
        for i in range(n_thresh):
            sweep_counts[i] += cms[i]
        recall_hits += hits
        recall_total += total
        kept.append((entry_id, class_count, maps, gt))

    if not report.processed:
        curve: List[float] = []
        best_threshold = None
        best_miou = None
        recall = None
        breakdown: Dict[str, Optional[float]] = {}
        per_class: List[Optional[float]] = []
    else:
        curve = [mean_iou(ConfusionMatrix(classes=num_classes + 1, counts=c))
                 for c in sweep_counts]
        best_idx = int(np.argmax(curve))
        best_threshold = float(thresholds[best_idx])
        best_miou = float(curve[best_idx])
        recall = recall_hits / recall_total if recall_total else None
        per_image = [(generate_pseudo_labels(maps, best_threshold, num_classes=num_classes),
                      gt, count) for _, count, maps, gt in kept]
        breakdown = breakdown_by_class_count(per_image, classes=num_classes + 1)
        per_class = per_class_iou(
            ConfusionMatrix(classes=num_classes + 1, counts=sweep_counts[best_idx]))

    report.extra = {
        "thresholds": [float(t) for t in thresholds],
        "miou_per_threshold": curve,
        "best_threshold": best_threshold,
        "best_miou": best_miou,
        "activated_recall": recall,
        "breakdown": breakdown,
        "per_class_iou_at_best": per_class,
    }
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        report_path = os.path.join(output_dir, "report.txt")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(f"config_digest = {digest}\n")
            fh.write(f"entries = {len(report.processed)}\n")
            fh.write(f"best_threshold = {best_threshold}\n")
            fh.write(f"best_miou = {best_miou}\n")
            fh.write(f"activated_recall = {recall}\n")
            for bucket, value in breakdown.items():
                fh.write(f"miou_bucket_{bucket} = {value}\n")
        csv_path = os.path.join(output_dir, "curve.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("threshold,miou\n")
            for t, m in zip(thresholds, curve):
                fh.write(f"{t},{m}\n")
        report.outputs.extend([report_path, csv_path])
        return _finish_report(report, output_dir)
    report.processed.sort()
    return report


def run_overlay_job(maps_dir: str, dataset: dataio.DatasetIndex, output_dir: str,
                    opacity: float = 0.5, workers: int = 1,
                    digest_params: Optional[Mapping] = None) -> JobReport:
    """Blend stored maps onto their images as heatmap PNGs."""
    digest = config_digest(digest_params or {"job": "overlay", "opacity": opacity})
    os.makedirs(output_dir, exist_ok=True)
    num_classes = len(dataset.class_names)
    report = JobReport(job="overlay", config_digest=digest)
    for entry_id, reason in dataset.rejected:
        report.failures.append(JobFailure(entry_id=entry_id, message=reason))

    def worker(entry: dataio.DatasetEntry) -> List[str]:
        image = dataio.read_image(entry.image_path)
        maps = _load_entry_maps(maps_dir, entry, num_classes)
        outputs = []
        for label_id, m in sorted(maps.items()):
            blend = viz.render_overlay(image, m, opacity=opacity)
            path = os.path.join(output_dir, f"{entry.image_id}_{label_id}.png")
            dataio.write_image_png(blend, path)
            outputs.append(path)
        return outputs

    _run_entries(dataset.entries, worker, workers, report)
    return _finish_report(report, output_dir)


def run_loss_check(seed: int = 0, trials: int = 20, class_counts: Sequence[int] = (2, 20),
                   height: int = 4, width: int = 4, alpha: float = 0.08,
                   fd_step: float = 1e-3) -> Dict:
    """Randomized analytic-vs-finite-difference check of the refinement loss."""
    rng = np.random.default_rng(seed)
    cases = []
    worst = 0.0
    for c in class_counts:
        for trial in range(trials):
            logits = rng.normal(0.0, 2.0, size=(height, width, c + 1))
            labels = rng.integers(0, c + 1, size=(height, width))
            saliency = SaliencyMap(data=rng.random(size=(height, width)).astype(np.float32))
            pseudo = LabelMap(data=labels.astype(np.int32), num_classes=c)
            pred = PredictionTensor(data=logits)
            breakdown, grad = total_loss(pred, pseudo, saliency, alpha=alpha)

            fd = np.zeros_like(logits)
            for idx in np.ndindex(logits.shape):
                bumped = logits.copy()
                bumped[idx] += fd_step
                up, _ = total_loss(PredictionTensor(bumped), pseudo, saliency, alpha=alpha)
                bumped[idx] -= 2 * fd_step
                down, _ = total_loss(PredictionTensor(bumped), pseudo, saliency, alpha=alpha)
                fd[idx] = (up.total - down.total) / (2 * fd_step)
            denom = max(float(np.abs(fd).max()), float(np.abs(grad).max()), 1e-12)
            rel = float(np.abs(grad - fd).max() / denom)
            worst = max(worst, rel)
            cases.append({"classes": c, "trial": trial, "tau": breakdown.tau,
                          "total": breakdown.total, "rel_error": rel})
    return {"seed": seed, "trials": trials, "fd_step": fd_step,
            "max_rel_error": worst, "cases": cases}
