"""Image samples and the on-disk dataset layout.

A dataset directory holds ``<split>/<person_id>_<camera_id>_<index>.png`` files
plus a ``dataset.json`` index carrying the same fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

SPLITS = ("train", "query", "gallery")


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    person_id: int
    camera_id: int
    occluded: bool = False
    occlusion_mask: Optional[np.ndarray] = None
    split: str = "train"
    index: int = 0

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.occluded and (self.occlusion_mask is None or self.occlusion_mask.max() <= 0):
            raise ValueError("occluded sample needs an occlusion mask with max > 0")

    @property
    def name(self) -> str:
        return f"{self.person_id}_{self.camera_id}_{self.index}"

    @property
    def shape(self):
        return self.pixels.shape[:2]


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round-trips are bit-exact."""
    return (to_uint8(x).astype(np.float32) / 255.0).astype(np.float32)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float32) / 255.0


def write_png(path, pixels: np.ndarray) -> None:
    arr = to_uint8(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, optimize=False)


def save_dataset(splits: Dict[str, List[ImageSample]], root, meta: Optional[dict] = None) -> Path:
    root = Path(root)
    records = []
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
        for s in splits.get(split, []):
            rel = f"{split}/{s.name}.png"
            write_png(root / rel, s.pixels)
            rec = {
                "file": rel,
                "person_id": int(s.person_id),
                "camera_id": int(s.camera_id),
                "index": int(s.index),
                "split": split,
                "occluded": bool(s.occluded),
            }
            if s.occlusion_mask is not None:
                mask_rel = f"{split}/{s.name}_mask.png"
                write_png(root / mask_rel, s.occlusion_mask)
                rec["mask"] = mask_rel
            records.append(rec)
    index = {"version": 1, "meta": meta or {}, "samples": records}
    (root / "dataset.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return root


def load_dataset(root) -> Dict[str, List[ImageSample]]:
    root = Path(root)
    path = root / "dataset.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset.json under {root}")
    index = json.loads(path.read_text())
    out: Dict[str, List[ImageSample]] = {k: [] for k in SPLITS}
    for rec in index["samples"]:
        pixels = read_png(root / rec["file"])
        mask = read_png(root / rec["mask"]) if "mask" in rec else None
        out[rec["split"]].append(
            ImageSample(
                pixels=pixels,
                person_id=rec["person_id"],
                camera_id=rec["camera_id"],
                occluded=rec.get("occluded", False),
                occlusion_mask=mask,
                split=rec["split"],
                index=rec.get("index", 0),
            )
        )
    return out


def dataset_meta(root) -> dict:
    return json.loads((Path(root) / "dataset.json").read_text()).get("meta", {})
