"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete. Everything here uses only the committed fixture bundle.
"""
import functools
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

import oracles
from camrefine.backend import class_conditional_map, compute_cam, forward, load_model
from camrefine.cli import main as cli_main
from camrefine.condinfer import (RefinementConfig, iterative_infer, merge_splits,
                                 split_multi_class, split_single_class,
                                 split_two_class)
from camrefine.coretypes import LabelMap, Rect, ResponseMap, SaliencyMap
from camrefine.dataio import load_response_map, read_image, read_label_png
from camrefine.metrics import accumulate, ConfusionMatrix, mean_iou
from camrefine.pseudo import DEFAULT_THRESHOLDS
from camrefine.refineloss import PredictionTensor, total_loss

from conftest import data_path


def criterion(name):
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except Exception:
                print(f"ACCEPTANCE FAIL: {name}")
                raise
            print(f"ACCEPTANCE PASS: {name}")
        return wrapper
    return decorator


def dataset_args():
    return ["--list", data_path("lists", "train.txt"),
            "--images", data_path("images"),
            "--labels", data_path("labels"),
            "--class-file", data_path("lists", "train_classes.txt"),
            "--class-names", "red,green,blue"]


def model_args():
    return ["--model", data_path("models", "triclass.onnx"),
            "--manifest", data_path("models", "triclass.manifest")]


@criterion("Eq.1 oracle equivalence (raw < 1e-5, resized+normalized < 1e-4, < 10 s)")
def test_eq1_oracle_equivalence(goldens):
    start = time.monotonic()
    handles = {}
    for case in goldens["cases"]:
        name = case["model"]
        if name not in handles:
            handles[name] = load_model(data_path("models", f"{name}.onnx"),
                                       data_path("models", f"{name}.manifest"))
        handle = handles[name]
        img = read_image(data_path("images", f"{case['image']}.png"))
        result = forward(handle, img)
        for label_id, cam_name in case["cams"].items():
            cam = compute_cam(result.features, handle.class_weights, int(label_id) - 1)
            golden = np.load(data_path("goldens", cam_name))
            assert np.abs(cam.data - golden).max() < 1e-5, (case["image"], label_id)
        for label_id, map_name in case["maps"].items():
            m = class_conditional_map(handle, img, int(label_id) - 1)
            golden = np.load(data_path("goldens", map_name))
            assert np.abs(m.data - golden).max() < 1e-4, (case["image"], label_id)
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"


@criterion("mIoU oracle equivalence (exact counts, mIoU within 1e-12, 100 pairs)")
def test_miou_oracle_equivalence():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        gt_arr = rng.integers(0, 21, size=(16, 16)).astype(np.int32)
        gt_arr[rng.random((16, 16)) < 0.05] = 255
        pred_arr = rng.integers(0, 21, size=(16, 16)).astype(np.int32)
        cm = accumulate(ConfusionMatrix(classes=21),
                        LabelMap(data=pred_arr, num_classes=20),
                        LabelMap(data=gt_arr, num_classes=20))
        expected = oracles.confusion_tally(pred_arr, gt_arr, classes=21)
        assert np.array_equal(cm.counts, expected)
        assert abs(mean_iou(cm) - oracles.miou_formula(expected)) < 1e-12


@criterion("Eq.4 gradient check (rel err < 1e-4 at h=1e-3; tau=0 collapse to 1e-12)")
def test_eq4_gradient_check():
    for c in (2, 20):
        rng = np.random.default_rng(100 + c)
        for _ in range(20):
            logits = rng.normal(0.0, 2.0, size=(4, 4, c + 1))
            labels = rng.integers(0, c + 1, size=(4, 4)).astype(np.int32)
            sal = rng.random((4, 4)).astype(np.float32)
            pseudo = LabelMap(data=labels, num_classes=c)
            saliency = SaliencyMap(data=sal)
            breakdown, grad = total_loss(PredictionTensor(data=logits), pseudo,
                                         saliency, alpha=0.08)
            fd = oracles.fd_gradient(
                lambda x: total_loss(PredictionTensor(data=x), pseudo, saliency,
                                     alpha=0.08)[0].total,
                logits, 1e-3)
            denom = max(np.abs(fd).max(), np.abs(grad).max())
            assert np.abs(grad - fd).max() / denom < 1e-4
    # tau = 0 instances: saliency exactly complements the pseudo background
    rng = np.random.default_rng(7)
    labels = np.zeros((4, 4), dtype=np.int32)
    labels[:, 2:] = 1
    sal = np.zeros((4, 4), dtype=np.float32)
    sal[:, :2] = 1.0
    for _ in range(5):
        logits = rng.normal(size=(4, 4, 2))
        breakdown, _ = total_loss(PredictionTensor(data=logits),
                                  LabelMap(data=labels, num_classes=1),
                                  SaliencyMap(data=sal), alpha=0.08)
        assert breakdown.tau == 0.0
        assert abs(breakdown.total - breakdown.l_seg) < 1e-12


@criterion("Iterative inference on the two-blob fixture (mask, coverage, trace, stop)")
def test_iterative_inference_behavior(twoblob_handle, goldens):
    img = read_image(data_path("images", "twoblob_main.png"))
    spec = goldens["images"]["twoblob_main"]
    rects = {b["kind"]: b["rect"] for b in spec["blobs"]}
    blob_a = np.zeros((128, 128), dtype=bool)
    t, l, h, w = rects["strong"]
    blob_a[t:t + h, l:l + w] = True
    blob_b = np.zeros((128, 128), dtype=bool)
    t, l, h, w = rects["dim"]
    blob_b[t:t + h, l:l + w] = True

    config = RefinementConfig()
    final, trace = iterative_infer(twoblob_handle, img, 0, config)

    baseline = class_conditional_map(twoblob_handle, img, 0)
    erased = baseline.data >= config.erase_threshold
    assert erased.any() and not (erased & ~blob_a).any(), "erase mask escapes blob A"

    assert (final.data[blob_a] > 0.3).mean() >= 0.8
    assert (final.data[blob_b] > 0.3).mean() >= 0.8

    counts = []
    before = 0
    for record in trace.records:
        active = int((record.accumulated_snapshot.data > config.activation_floor).sum())
        assert active >= before, "activated set shrank"
        assert record.new_activated_pixels == active - before
        counts.append(active)
        before = active
    assert counts == sorted(counts)

    assert trace.stop_reason == "converged"
    assert len(trace.records) == 3, "designed stopping iteration is 3"


@criterion("Split & unite geometry goldens and constant-patch merge")
def test_split_unite_geometry():
    spec = split_single_class(100, 100, (50.0, 50.0))
    assert spec.patches == (Rect(0, 0, 50, 50), Rect(0, 50, 50, 50),
                            Rect(50, 0, 50, 50), Rect(50, 50, 50, 50))
    spec = split_single_class(100, 100, (5.0, 50.0))
    assert spec.patches == (Rect(0, 0, 32, 50), Rect(0, 50, 32, 50),
                            Rect(32, 0, 68, 50), Rect(32, 50, 68, 50))
    two = split_two_class(100, 100, (25.0, 25.0), (75.0, 75.0))
    assert two.overlap == Rect(25, 25, 51, 51)
    assert two.patches == (Rect(0, 0, 76, 76), Rect(0, 25, 76, 75),
                           Rect(25, 0, 75, 76), Rect(25, 25, 75, 75))
    multi = split_multi_class(128, 128, [(1, (20.0, 20.0)), (2, (50.0, 80.0)),
                                         (3, (90.0, 40.0))])
    assert multi[0][1].patches[0] == Rect(0, 0, 32, 32)
    assert multi[1][1].patches[3] == Rect(50, 80, 78, 48)
    assert multi[2][1].patches[2] == Rect(90, 0, 38, 40)

    values = [0.2, 0.4, 0.6, 0.8]
    patch_maps = [(ResponseMap(class_id=0,
                               data=np.full((r.height, r.width), v, dtype=np.float32)),
                   r) for v, r in zip(values, two.patches)]
    merged = merge_splits(patch_maps, 100, 100)
    expected = np.zeros((100, 100))
    for v, r in zip(values, two.patches):
        for i in range(r.top, r.bottom):
            for j in range(r.left, r.right):
                expected[i, j] = max(expected[i, j], v)
    assert np.abs(merged.data - expected / expected.max()).max() < 1e-7


def _oracle_best_miou(maps_dir):
    ids = ["blob1a", "blob1b", "blob2a", "blob3a"]
    per_entry = []
    gts = []
    for image_id in ids:
        maps = {}
        for label_id in (1, 2, 3):
            path = os.path.join(maps_dir, f"{image_id}_{label_id}.npy")
            if os.path.isfile(path):
                maps[label_id] = load_response_map(path).data
        per_entry.append(maps)
        gts.append(read_label_png(data_path("labels", image_id + ".png"),
                                  num_classes=3).data)
    best = -1.0
    for t in DEFAULT_THRESHOLDS:
        total = np.zeros((4, 4), dtype=np.int64)
        for maps, gt in zip(per_entry, gts):
            pred = oracles.argmax_labels(maps, t)
            total += oracles.confusion_tally(pred, gt, classes=4)
        best = max(best, oracles.miou_formula(total))
    return best


@criterion("End-to-end improvement: refined best-mIoU >= baseline + 5 points")
def test_end_to_end_improvement(tmp_path):
    runner = CliRunner()
    cam_dir = str(tmp_path / "cam")
    infer_dir = str(tmp_path / "infer")
    result = runner.invoke(cli_main, ["cam", *model_args(), *dataset_args(),
                                      "--out", cam_dir])
    assert result.exit_code == 0, result.output
    result = runner.invoke(cli_main, ["infer", *model_args(), *dataset_args(),
                                      "--out", infer_dir])
    assert result.exit_code == 0, result.output

    baseline = _oracle_best_miou(cam_dir)
    refined = _oracle_best_miou(infer_dir)
    assert refined >= baseline + 0.05, f"baseline {baseline:.4f}, refined {refined:.4f}"

    # the eval job must agree with the oracle sweep
    eval_out = str(tmp_path / "eval")
    result = runner.invoke(cli_main, ["eval", "--maps", infer_dir, *dataset_args(),
                                      "--out", eval_out])
    assert result.exit_code == 0, result.output
    report = dict(line.split(" = ") for line in
                  open(os.path.join(eval_out, "report.txt")).read().splitlines()
                  if " = " in line)
    assert abs(float(report["best_miou"]) - refined) < 1e-9


@criterion("Determinism: worker counts 1 and 8 give byte-identical digests")
def test_worker_determinism(tmp_path):
    runner = CliRunner()
    digests = []
    for workers, sub in ((1, "w1"), (8, "w8")):
        out = str(tmp_path / sub)
        result = runner.invoke(cli_main, ["infer", *model_args(), *dataset_args(),
                                          "--out", out, "--workers", str(workers)])
        assert result.exit_code == 0, result.output
        line = [l for l in result.output.splitlines() if "output digest" in l][0]
        digests.append(line.split(":")[1].strip())
    assert digests[0] == digests[1]


VOC_ROOT = os.environ.get("CAMREFINE_VOC_ROOT")
VOC_MODEL = os.environ.get("CAMREFINE_VOC_MODEL")
VOC_MANIFEST = os.environ.get("CAMREFINE_VOC_MANIFEST")


@pytest.mark.skipif(not (VOC_ROOT and VOC_MODEL and VOC_MANIFEST),
                    reason="optional integration: set CAMREFINE_VOC_ROOT, "
                           "CAMREFINE_VOC_MODEL, CAMREFINE_VOC_MANIFEST")
@criterion("Optional integration: VOC train best-mIoU within 1.5 of 48.0, recall "
           "within 3 of 84%")
def test_optional_voc_integration(tmp_path):
    runner = CliRunner()
    args = ["--model", VOC_MODEL, "--manifest", VOC_MANIFEST,
            "--list", os.path.join(VOC_ROOT, "ImageSets", "Segmentation", "train.txt"),
            "--images", os.path.join(VOC_ROOT, "JPEGImages"),
            "--labels", os.path.join(VOC_ROOT, "SegmentationClass"),
            "--class-file", os.environ.get("CAMREFINE_VOC_CLASS_FILE", "")]
    maps = str(tmp_path / "maps")
    assert runner.invoke(cli_main, ["cam", *args, "--out", maps]).exit_code in (0, 3)
    out = str(tmp_path / "eval")
    result = runner.invoke(cli_main, ["eval", "--maps", maps,
                                      *args[2:], "--out", out])
    assert result.exit_code in (0, 3)
    report = dict(line.split(" = ") for line in
                  open(os.path.join(out, "report.txt")).read().splitlines()
                  if " = " in line)
    assert abs(float(report["best_miou"]) * 100 - 48.0) <= 1.5
    assert abs(float(report["activated_recall"]) * 100 - 84.0) <= 3.0
