"""Activation-aware mask refinement loss with analytic gradients.

Total loss = seg cross entropy on pseudo labels plus a saliency BCE on the
background channel, weighted by alpha * (e^tau - 1) where tau is the
conflict temperature between the pseudo background and the non-salient
mask. tau is treated as a constant: no gradient flows through it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .coretypes import IGNORE, LabelMap, SaliencyMap
from .errors import ContractError, DimensionError, UndefinedLossError
from .metrics import conflict_temperature

DEFAULT_ALPHA = 0.08


@dataclass(frozen=True)
class PredictionTensor:
    """Segmentation logits, shape (H, W, C+1); channel 0 is background."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] < 2:
            raise DimensionError(f"prediction must be (H, W, C+1) with C >= 1, got {d.shape}")
        if not np.isfinite(d).all():
            raise ContractError("prediction logits must be finite")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LossBreakdown:
    l_seg: float
    l_sal: float
    tau: float
    alpha: float
    total: float

    def __post_init__(self):
        if self.l_seg < 0 or self.l_sal < 0:
            raise ContractError("loss terms must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError(f"tau must lie in [0, 1], got {self.tau}")
        expected = self.l_seg + self.alpha * (np.exp(self.tau) - 1.0) * self.l_sal
        if abs(self.total - expected) > 1e-9:
            raise ContractError("total does not decompose into l_seg + alpha*(e^tau-1)*l_sal")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_dims(pred: PredictionTensor, h: int, w: int, what: str) -> None:
    if (pred.height, pred.width) != (h, w):
        raise DimensionError(f"prediction {pred.height}x{pred.width} does not match {what} {h}x{w}")


def seg_cross_entropy(pred: PredictionTensor, pseudo: LabelMap
                      ) -> Tuple[float, np.ndarray]:
    """Mean softmax cross entropy against pseudo labels, with d(loss)/d(logits).

    Ignore-index pixels contribute zero loss and zero gradient.
    """
    _check_dims(pred, pseudo.height, pseudo.width, "pseudo labels")
    labels = pseudo.data
    valid = labels != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UndefinedLossError("every pixel carries the ignore index")
    if labels[valid].max() >= pred.channels:
        raise ContractError(f"label {labels[valid].max()} exceeds channel count {pred.channels}")
    probs = _softmax(pred.data)
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(probs, safe_labels[..., None].astype(np.int64), axis=2)[..., 0]
    loss = float(-(np.log(picked[valid])).sum() / n_valid)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_labels[..., None].astype(np.int64), 1.0, axis=2)
    grad = (probs - onehot) / n_valid
    grad[~valid] = 0.0
    return loss, grad


def saliency_bce(pred: PredictionTensor, saliency: SaliencyMap
                 ) -> Tuple[float, np.ndarray]:
    """Binary cross entropy of the softmax background channel against 1 - saliency.

    Soft saliency values act as soft targets; gradients flow through the
    softmax into every channel.
    """
    _check_dims(pred, saliency.height, saliency.width, "saliency map")
    logits = pred.data
    probs = _softmax(logits)
    p_bg = probs[..., 0]
    target = 1.0 - saliency.data.astype(np.float64)
    n = p_bg.size
    eps = 1e-12
    p = np.clip(p_bg, eps, 1.0 - eps)
    loss = float(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / n)
    # Exact gradient through the softmax: dL/dz_0 = (p - t)/n and, for j != 0,
    # dL/dz_j = (t - p) * r_j / n with r_j the softmax renormalized over the
    # non-background channels (the p -> 1 singularity cancels).
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    fg_sum = e[..., 1:].sum(axis=-1, keepdims=True)
    r = e[..., 1:] / np.maximum(fg_sum, 1e-300)
    grad = np.empty_like(probs)
    grad[..., 0] = (p_bg - target) / n
    grad[..., 1:] = ((target - p_bg) / n)[..., None] * r
    return loss, grad


def total_loss(pred: PredictionTensor, pseudo: LabelMap, saliency: SaliencyMap,
               alpha: float = DEFAULT_ALPHA) -> Tuple[LossBreakdown, np.ndarray]:
    """Combined refinement loss and its gradient w.r.t. the logits."""
    if alpha <= 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    l_seg, g_seg = seg_cross_entropy(pred, pseudo)
    l_sal, g_sal = saliency_bce(pred, saliency)
    tau = conflict_temperature(pseudo, saliency)
    weight = alpha * (np.exp(tau) - 1.0)
    total = l_seg + weight * l_sal
    breakdown = LossBreakdown(l_seg=l_seg, l_sal=l_sal, tau=tau, alpha=alpha, total=float(total))
    return breakdown, g_seg + weight * g_sal
