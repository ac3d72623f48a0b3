"""Overlay rendering: colorize a response map and blend it onto the image."""
from __future__ import annotations

import numpy as np

from .coretypes import ImageTensor, ResponseMap
from .errors import DimensionError


def colorize(m: ResponseMap) -> np.ndarray:
    """Map activations through a blue-to-red heat ramp, (H, W, 3) float in [0,1]."""
    v = np.clip(m.data.astype(np.float64), 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=2)


def render_overlay(image: ImageTensor, m: ResponseMap, opacity: float = 0.5) -> np.ndarray:
    """Blend heatmap onto the image at fixed opacity; output matches input size."""
    if (m.height, m.width) != (image.height, image.width):
        raise DimensionError(
            f"map {m.height}x{m.width} does not match image {image.height}x{image.width}")
    heat = colorize(m)
    out = (1.0 - opacity) * image.data.astype(np.float64) + opacity * heat
    return np.clip(out, 0.0, 1.0)
