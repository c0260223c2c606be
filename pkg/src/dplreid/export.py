"""Embedding export and feature-norm heatmaps."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .evaluation import extract_embeddings
from .model import DPLReID, to_input
from .samples import ImageSample, to_uint8, write_png

EMB_MAGIC = b"DPLREMB1"


def write_embeddings(path, feats: np.ndarray, ids, cams, names: Sequence[str] = ()) -> Path:
    """``magic | u64 header length | JSON header | n x D little-endian float32``."""
    feats = np.ascontiguousarray(feats, dtype="<f4")
    header = {
        "shape": list(feats.shape),
        "dtype": "float32",
        "byteorder": "little",
        "ids": [int(i) for i in ids],
        "cams": [int(c) for c in cams],
        "names": list(names),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(feats.tobytes())
    return path


def read_embeddings(path) -> Tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    feats = np.frombuffer(raw[16 + n:], dtype="<f4").reshape(header["shape"])
    return feats, header


def export_embeddings(model: DPLReID, samples: Sequence[ImageSample], path) -> Path:
    feats, ids, cams = extract_embeddings(model, samples)
    return write_embeddings(path, feats, ids, cams, [s.name for s in samples])


@torch.no_grad()
def feature_norm_maps(model: DPLReID, samples: Sequence[ImageSample]) -> np.ndarray:
    """Per-cell L2 norm of the fused intermediate features, ``n x H' x W'``."""
    model.eval()
    x = to_input(np.stack([s.pixels for s in samples]))
    f_x4, _ = model.fused_features(x)
    if model.cfg.variant == "grid":
        norms = f_x4.norm(dim=1)
    else:
        gh, gw = model.cfg.grid_hw
        norms = f_x4[:, 1:].norm(dim=-1).reshape(-1, gh, gw)
    return norms.numpy()


def heatmap_image(norm_map: np.ndarray, h: int, w: int) -> np.ndarray:
    """Min-max scaled map upsampled (bilinear) to ``h x w``, values in [0,1]."""
    lo, hi = float(norm_map.min()), float(norm_map.max())
    scaled = (norm_map - lo) / (hi - lo) if hi > lo else np.zeros_like(norm_map)
    img = Image.fromarray(scaled.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)


def dump_heatmaps(model: DPLReID, samples: Sequence[ImageSample], out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for start in range(0, len(samples), 64):
        chunk = samples[start:start + 64]
        for s, m in zip(chunk, feature_norm_maps(model, chunk)):
            h, w = s.pixels.shape[:2]
            p = out_dir / f"{s.name}_heat.png"
            Image.fromarray(to_uint8(heatmap_image(m, h, w)), mode="L").save(p)
            paths.append(p)
    return paths
