"""Fixed pretrained classifier: loading, forward passes, activation maps.

The classifier is never modified. Models are ONNX files accompanied by a
plain-text manifest naming the graph tensors and preprocessing constants:

    input = image              # graph input tensor
    features = features        # penultimate feature map output (1, K, h, w)
    scores = scores            # per-class score output (1, C)
    weights = fc_weight        # initializer holding the (C, K) FC weights
    classes = 2                # C
    units = 4                  # K
    mean = 0.0, 0.0, 0.0       # per-channel preprocessing mean
    std = 1.0, 1.0, 1.0        # per-channel preprocessing std
    threshold = 0.5            # classification probability threshold
    scores_are_logits = false  # apply sigmoid to the score output if true
    # optional: input_height / input_width force a fixed input size

Lines starting with '#' are comments; keys are case-sensitive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import onnxio
from .coretypes import (ClassScores, ClassWeights, FeatureStack, ImageTensor,
                        ResponseMap, normalize, resize_bilinear, _resize_array)
from .errors import DimensionError, ModelError
from .onnxrun import GraphExecutor

_REQUIRED_KEYS = ("input", "features", "scores", "weights", "classes", "units",
                  "mean", "std", "threshold")


@dataclass(frozen=True)
class Manifest:
    input_name: str
    features_name: str
    scores_name: str
    weights_name: str
    class_count: int
    feature_unit_count: int
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    classification_threshold: float
    scores_are_logits: bool = False
    input_height: Optional[int] = None
    input_width: Optional[int] = None


@dataclass(frozen=True)
class ClassifierHandle:
    """Loaded classifier plus everything Eq.-1-style map extraction needs."""

    model_path: str
    manifest: Manifest
    executor: GraphExecutor
    class_weights: ClassWeights

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    @property
    def feature_unit_count(self) -> int:
        return self.manifest.feature_unit_count

    @property
    def classification_threshold(self) -> float:
        return self.manifest.classification_threshold


@dataclass(frozen=True)
class ForwardResult:
    scores: ClassScores
    features: FeatureStack


def parse_manifest(path: str) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except FileNotFoundError:
        raise ModelError(f"manifest file not found: {path}") from None
    kv: Dict[str, str] = {}
    for i, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ModelError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in kv]
    if missing:
        raise ModelError(f"{path}: manifest missing keys {missing}")

    def triple(key: str) -> Tuple[float, float, float]:
        parts = [p.strip() for p in kv[key].split(",")]
        if len(parts) != 3:
            raise ModelError(f"{path}: {key} must have 3 comma-separated values")
        return tuple(float(p) for p in parts)  # type: ignore[return-value]

    try:
        threshold = float(kv["threshold"])
        manifest = Manifest(
            input_name=kv["input"],
            features_name=kv["features"],
            scores_name=kv["scores"],
            weights_name=kv["weights"],
            class_count=int(kv["classes"]),
            feature_unit_count=int(kv["units"]),
            mean=triple("mean"),
            std=triple("std"),
            classification_threshold=threshold,
            scores_are_logits=kv.get("scores_are_logits", "false").lower() in ("true", "1", "yes"),
            input_height=int(kv["input_height"]) if "input_height" in kv else None,
            input_width=int(kv["input_width"]) if "input_width" in kv else None,
        )
    except ValueError as exc:
        raise ModelError(f"{path}: bad manifest value: {exc}") from exc
    if not 0.0 < threshold < 1.0:
        raise ModelError(f"{path}: threshold must lie in (0, 1), got {threshold}")
    if manifest.class_count < 1 or manifest.feature_unit_count < 1:
        raise ModelError(f"{path}: classes and units must be positive")
    if any(s == 0.0 for s in manifest.std):
        raise ModelError(f"{path}: std components must be nonzero")
    return manifest


def load_model(model_path: str, manifest: "Manifest | str") -> ClassifierHandle:
    """Load an ONNX classifier; repeated loads of one file yield identical weights."""
    if isinstance(manifest, str):
        manifest = parse_manifest(manifest)
    model = onnxio.load_model_file(model_path)
    graph = model.graph
    known = set(graph.initializers)
    for node in graph.nodes:
        known.update(node.outputs)
    graph_inputs = {vi.name for vi in graph.inputs}
    if manifest.input_name not in graph_inputs:
        raise ModelError(f"{model_path}: input tensor {manifest.input_name!r} not a graph input")
    for name in (manifest.features_name, manifest.scores_name):
        if name not in known:
            raise ModelError(f"{model_path}: tensor {name!r} not present in graph")
    weights_tensor = graph.initializers.get(manifest.weights_name)
    if weights_tensor is None:
        raise ModelError(f"{model_path}: weight tensor {manifest.weights_name!r} not an initializer")
    w = np.asarray(weights_tensor.array, dtype=np.float32)
    expected = (manifest.class_count, manifest.feature_unit_count)
    if w.shape != expected:
        raise ModelError(
            f"{model_path}: weight tensor shape {w.shape} does not match declared C,K {expected}")
    executor = GraphExecutor(model, model_path)
    return ClassifierHandle(model_path=model_path, manifest=manifest,
                            executor=executor, class_weights=ClassWeights(data=w))


def preprocess(handle: ClassifierHandle, image: ImageTensor) -> np.ndarray:
    """Image -> NCHW float32 network input per the manifest."""
    m = handle.manifest
    data = image.data
    if m.input_height is not None and m.input_width is not None:
        chans = [_resize_array(data[:, :, c], m.input_height, m.input_width) for c in range(3)]
        data = np.stack(chans, axis=2).astype(np.float32)
    mean = np.asarray(m.mean, dtype=np.float32)
    std = np.asarray(m.std, dtype=np.float32)
    x = (data - mean) / std
    return x.transpose(2, 0, 1)[None, ...].astype(np.float32)


def forward(handle: ClassifierHandle, image: ImageTensor) -> ForwardResult:
    """Deterministic forward pass returning class scores and feature maps."""
    x = preprocess(handle, image)
    m = handle.manifest
    out = handle.executor.run({m.input_name: x}, [m.features_name, m.scores_name])
    feats = np.asarray(out[m.features_name])
    scores = np.asarray(out[m.scores_name]).reshape(-1)
    if feats.ndim == 4:
        if feats.shape[0] != 1:
            raise DimensionError(f"expected batch 1 features, got {feats.shape}")
        feats = feats[0]
    if feats.shape[0] != m.feature_unit_count:
        raise DimensionError(
            f"model produced {feats.shape[0]} feature units, manifest declares {m.feature_unit_count}")
    if scores.shape[0] != m.class_count:
        raise DimensionError(
            f"model produced {scores.shape[0]} scores, manifest declares {m.class_count}")
    if m.scores_are_logits:
        scores = np.where(scores >= 0, 1.0 / (1.0 + np.exp(-scores)),
                          np.exp(scores) / (1.0 + np.exp(scores)))
    return ForwardResult(scores=ClassScores(probabilities=scores.astype(np.float32)),
                         features=FeatureStack(data=feats.astype(np.float32)))


def _cam_unclamped(features: FeatureStack, weights: ClassWeights, class_id: int) -> np.ndarray:
    """Weighted feature sum before the non-negativity clamp (float64)."""
    if class_id < 0 or class_id >= weights.classes:
        raise DimensionError(f"class id {class_id} outside 0..{weights.classes - 1}")
    if features.units != weights.units:
        raise DimensionError(
            f"feature stack has {features.units} units, weights expect {weights.units}")
    w = weights.data[class_id].astype(np.float64)
    return np.tensordot(w, features.data.astype(np.float64), axes=(0, 0))


def compute_cam(features: FeatureStack, weights: ClassWeights, class_id: int) -> ResponseMap:
    """Weighted unit sum at feature resolution, negative evidence clamped to 0."""
    raw = _cam_unclamped(features, weights, class_id)
    np.maximum(raw, 0.0, out=raw)
    return ResponseMap(class_id=class_id, data=raw.astype(np.float32), normalized=False)


def class_conditional_map(handle: ClassifierHandle, image: ImageTensor,
                          class_id: int) -> ResponseMap:
    """Image-resolution normalized activation map for a class known to be present.

    Composition order is fixed: clamp at 0, bilinear resize to image size,
    then peak-normalize.
    """
    result = forward(handle, image)
    cam = compute_cam(result.features, handle.class_weights, class_id)
    resized = resize_bilinear(cam, image.height, image.width)
    return normalize(resized)


def present_classes(handle: ClassifierHandle, image: ImageTensor) -> Tuple[int, ...]:
    """Classes whose score exceeds the classification threshold."""
    result = forward(handle, image)
    p = result.scores.probabilities
    return tuple(int(c) for c in np.nonzero(p > handle.classification_threshold)[0])
