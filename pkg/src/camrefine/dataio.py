"""Dataset ingestion and artifact persistence.

On-disk formats:
  images    8-bit PNG/JPEG, decoded to float32 RGB in [0, 1]
  labels    8-bit palette PNG, VOC colormap, indices 0..C plus 255 = ignore
  saliency  8-bit single-channel PNG, scaled to [0, 1]
  tensors   NPY v1.x, little-endian float32 (H, W), plus a '<path>.meta'
            key=value sidecar (class_id, normalized, height, width, digest)
  lists     one image id per line; class sidecar lines are 'id name [name...]'
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .coretypes import IGNORE, ImageTensor, LabelMap, ResponseMap, SaliencyMap
from .errors import DataFormatError

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


def voc_palette() -> List[int]:
    """Standard VOC colormap for all 256 palette slots (bit-interleave rule)."""
    palette = []
    for idx in range(256):
        r = g = b = 0
        value = idx
        for shift in range(8):
            r |= ((value >> 0) & 1) << (7 - shift)
            g |= ((value >> 1) & 1) << (7 - shift)
            b |= ((value >> 2) & 1) << (7 - shift)
            value >>= 3
        palette.extend((r, g, b))
    return palette


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    image_path: str
    label_path: Optional[str]
    saliency_path: Optional[str]
    class_ids: Tuple[int, ...]  # image-level labels, 1-based


@dataclass(frozen=True)
class DatasetIndex:
    entries: Tuple[DatasetEntry, ...]
    class_names: Tuple[str, ...]
    rejected: Tuple[Tuple[str, str], ...] = ()  # (image id, reason)

    def __len__(self) -> int:
        return len(self.entries)


def _read_class_sidecar(path: str, class_names: Sequence[str]) -> Dict[str, Tuple[int, ...]]:
    name_to_id = {n: i + 1 for i, n in enumerate(class_names)}
    out: Dict[str, Tuple[int, ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            image_id, names = parts[0], parts[1:]
            ids = []
            for n in names:
                if n not in name_to_id:
                    raise DataFormatError(f"{path}:{lineno}: unknown class name {n!r}")
                ids.append(name_to_id[n])
            out[image_id] = tuple(sorted(set(ids)))
    return out


def load_dataset(list_file: str, image_dir: str, label_dir: Optional[str] = None,
                 saliency_dir: Optional[str] = None, class_file: Optional[str] = None,
                 class_names: Sequence[str] = VOC_CLASSES,
                 image_ext: str = ".png") -> DatasetIndex:
    """Build a validated index; entries with missing files are rejected, not fatal."""
    try:
        with open(list_file, "r", encoding="utf-8") as fh:
            ids = [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset list {list_file}: {exc}") from exc
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{list_file}: duplicate image ids")
    class_map = _read_class_sidecar(class_file, class_names) if class_file else {}
    entries: List[DatasetEntry] = []
    rejected: List[Tuple[str, str]] = []
    for image_id in sorted(ids):
        image_path = os.path.join(image_dir, image_id + image_ext)
        if not os.path.isfile(image_path):
            jpg = os.path.join(image_dir, image_id + ".jpg")
            if os.path.isfile(jpg):
                image_path = jpg
            else:
                rejected.append((image_id, f"image missing: {image_path}"))
                continue
        label_path = None
        if label_dir is not None:
            label_path = os.path.join(label_dir, image_id + ".png")
            if not os.path.isfile(label_path):
                rejected.append((image_id, f"label missing: {label_path}"))
                continue
        saliency_path = None
        if saliency_dir is not None:
            saliency_path = os.path.join(saliency_dir, image_id + ".png")
            if not os.path.isfile(saliency_path):
                rejected.append((image_id, f"saliency missing: {saliency_path}"))
                continue
        entries.append(DatasetEntry(image_id=image_id, image_path=image_path,
                                    label_path=label_path, saliency_path=saliency_path,
                                    class_ids=class_map.get(image_id, ())))
    return DatasetIndex(entries=tuple(entries), class_names=tuple(class_names),
                        rejected=tuple(rejected))


def read_image(path: str) -> ImageTensor:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except OSError as exc:
        raise DataFormatError(f"cannot read image {path}: {exc}") from exc
    return ImageTensor(data=arr.astype(np.float32) / 255.0)


def read_label_png(path: str, num_classes: int = 20) -> LabelMap:
    """Read a palette-indexed label PNG; indices are taken verbatim."""
    try:
        with Image.open(path) as im:
            if im.mode != "P":
                raise DataFormatError(f"{path}: expected palette-indexed PNG, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.int32)
    except OSError as exc:
        raise DataFormatError(f"cannot read label PNG {path}: {exc}") from exc
    bad = (arr > num_classes) & (arr != IGNORE)
    if bad.any():
        raise DataFormatError(f"{path}: label index {int(arr[bad][0])} outside "
                              f"0..{num_classes} and not {IGNORE}")
    return LabelMap(data=arr, num_classes=num_classes)


def write_label_png(label: LabelMap, path: str) -> None:
    im = Image.fromarray(label.data.astype(np.uint8), mode="P")
    im.putpalette(voc_palette())
    im.save(path, format="PNG")


def read_saliency_png(path: str) -> SaliencyMap:
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataFormatError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise DataFormatError(f"cannot read saliency PNG {path}: {exc}") from exc
    return SaliencyMap(data=arr.astype(np.float64) / 255.0)


def write_saliency_png(sal: SaliencyMap, path: str) -> None:
    arr = np.round(sal.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_response_map(m: ResponseMap, path: str, config_digest: str = "") -> None:
    """Write the map as little-endian float32 NPY plus a key=value sidecar."""
    arr = np.ascontiguousarray(m.data, dtype="<f4")
    with open(path, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)
    meta = [
        f"class_id = {m.class_id}",
        f"normalized = {str(bool(m.normalized)).lower()}",
        f"height = {m.height}",
        f"width = {m.width}",
        f"config_digest = {config_digest}",
    ]
    with open(path + ".meta", "w", encoding="utf-8") as fh:
        fh.write("\n".join(meta) + "\n")


def load_response_map(path: str) -> ResponseMap:
    try:
        with open(path, "rb") as fh:
            arr = np.load(fh, allow_pickle=False)
    except FileNotFoundError:
        raise DataFormatError(f"response map not found: {path}") from None
    except (ValueError, EOFError, OSError) as exc:
        raise DataFormatError(f"{path}: corrupt tensor file: {exc}") from exc
    if arr.ndim != 2 or arr.dtype != np.float32:
        raise DataFormatError(f"{path}: expected float32 (H, W) tensor, "
                              f"got {arr.dtype} {arr.shape}")
    meta = _read_sidecar(path + ".meta")
    class_id = int(meta.get("class_id", "0"))
    normalized = meta.get("normalized", "false") == "true"
    if "height" in meta and (int(meta["height"]), int(meta["width"])) != arr.shape:
        raise DataFormatError(f"{path}: sidecar shape {meta['height']}x{meta['width']} "
                              f"does not match tensor {arr.shape}")
    return ResponseMap(class_id=class_id, data=arr, normalized=normalized)


def _read_sidecar(path: str) -> Dict[str, str]:
    if not os.path.isfile(path):
        return {}
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_image_png(image_data: np.ndarray, path: str) -> None:
    """Save (H, W, 3) float [0,1] or uint8 data as RGB PNG."""
    a = np.asarray(image_data)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path, format="PNG")
