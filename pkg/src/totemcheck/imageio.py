"""PNG and JSON helpers shared by the pipeline stages."""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np


def write_rgb16(path, image: np.ndarray):
    """Write a float RGB image in [0, 1] as a 16-bit PNG."""
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), cv2.cvtColor(q, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_rgb(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float RGB in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"could not read image {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float64) / scale


def write_mask(path, mask: np.ndarray):
    if not cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8)):
        raise OSError(f"could not write {path}")


def read_mask(path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if m is None:
        raise FileNotFoundError(f"could not read mask {path}")
    if m.ndim == 3:
        m = m[..., 0]
    return m != 0


def write_heatmap_png(path, heat: np.ndarray):
    """Viridis-mapped 8-bit rendering of a [0, 1] heatmap."""
    q = np.round(np.clip(heat, 0.0, 1.0) * 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.applyColorMap(q, cv2.COLORMAP_VIRIDIS)):
        raise OSError(f"could not write {path}")


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}: invalid JSON ({e})") from e
