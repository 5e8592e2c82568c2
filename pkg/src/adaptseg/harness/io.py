"""Raster outputs: binary masks and 16-bit score maps with a range sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_mask(mask, path) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)
    return path


def save_score_map(values, path) -> Path:
    """Min-max scaled 16-bit PNG plus ``<name>.json`` holding the original range."""
    path = Path(path)
    v = values.detach().numpy() if hasattr(values, "detach") else np.asarray(values)
    v = v.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    Image.fromarray(np.rint(scaled * 65535).astype(np.uint16)).save(path)
    path.with_suffix(".json").write_text(json.dumps({"min": lo, "max": hi}))
    return path


def load_score_map(path) -> np.ndarray:
    path = Path(path)
    rng = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        raw = np.asarray(im).astype(np.float64) / 65535
    return rng["min"] + raw * (rng["max"] - rng["min"])


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
