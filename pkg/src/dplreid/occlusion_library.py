"""Occluder instance library: manifest IO, validation, sampling and a
procedurally drawn stand-in library.

Each instance is a full-frame RGBA canvas. Everything outside the occluder is
transparent, so the occluder already sits at its anchor once the canvas is
resized to the pedestrian image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .samples import quantize, read_png, write_png

MANIFEST_VERSION = 1
STRONG_COVERAGE = 0.4
COVERAGE_TOL = 1e-3
CATEGORIES = ("strong", "weak")


class LibraryError(ValueError):
    """Manifest or instance problem; ``instance_id`` names the culprit when known."""

    def __init__(self, message: str, instance_id: str | None = None):
        super().__init__(message if instance_id is None else f"{instance_id}: {message}")
        self.instance_id = instance_id


@dataclass
class OcclusionInstance:
    id: str
    pixels: np.ndarray  # H x W x 4, alpha last
    category: str
    anchor: Tuple[float, float, float, float]
    coverage: float
    source: str = ""

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]

    @property
    def rgb(self) -> np.ndarray:
        return self.pixels[..., :3]


@dataclass
class LibraryManifest:
    version: int
    instances: List[OcclusionInstance]
    category_counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.category_counts:
            self.category_counts = count_categories(self.instances)

    def __len__(self):
        return len(self.instances)

    def by_category(self, category: str) -> List[OcclusionInstance]:
        return [inst for inst in self.instances if inst.category == category]

    def get(self, instance_id: str) -> OcclusionInstance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)


def count_categories(instances) -> Dict[str, int]:
    counts = {c: 0 for c in CATEGORIES}
    for inst in instances:
        counts[inst.category] = counts.get(inst.category, 0) + 1
    return counts


def alpha_coverage(alpha: np.ndarray) -> float:
    return float(np.mean(alpha > 0.5))


def validate_instance(inst: OcclusionInstance) -> List[str]:
    """Return human-readable invariant violations; empty means valid."""
    problems = []
    px = np.asarray(inst.pixels)
    if px.ndim != 3 or px.shape[2] != 4:
        return [f"pixels must be H x W x 4, got shape {px.shape}"]
    if not np.all(np.isfinite(px)):
        problems.append("non-finite pixel values")
    alpha = px[..., 3]
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        problems.append("alpha outside [0,1]")
    if px[..., :3].min() < 0.0 or px[..., :3].max() > 1.0:
        problems.append("rgb outside [0,1]")
    if not np.any(alpha > 0):
        problems.append("no opaque pixel")

    if len(inst.anchor) != 4:
        problems.append("anchor must have 4 coordinates")
    else:
        x0, y0, x1, y1 = inst.anchor
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            problems.append(f"anchor {tuple(inst.anchor)} not a normalized rectangle")

    if inst.category not in CATEGORIES:
        problems.append(f"unknown category {inst.category!r}")
    elif inst.category == "strong" and inst.coverage < STRONG_COVERAGE:
        problems.append(f"strong instance with coverage {inst.coverage:.4f} < {STRONG_COVERAGE}")
    elif inst.category == "weak" and inst.coverage >= STRONG_COVERAGE:
        problems.append(f"weak instance with coverage {inst.coverage:.4f} >= {STRONG_COVERAGE}")

    if not 0.0 <= inst.coverage <= 1.0:
        problems.append("coverage outside [0,1]")
    actual = alpha_coverage(alpha)
    if abs(actual - inst.coverage) > COVERAGE_TOL:
        problems.append(f"coverage mismatch: stored {inst.coverage:.4f}, recomputed {actual:.4f}")
    return problems


def validate_manifest(lib: LibraryManifest) -> List[Tuple[str, str]]:
    """All (instance_id, violation) pairs, including manifest-level ones."""
    out = []
    seen = set()
    for inst in lib.instances:
        if inst.id in seen:
            out.append((inst.id, "duplicate id"))
        seen.add(inst.id)
        out.extend((inst.id, msg) for msg in validate_instance(inst))
    actual = count_categories(lib.instances)
    for cat in set(actual) | set(lib.category_counts):
        if actual.get(cat, 0) != lib.category_counts.get(cat, 0):
            out.append(("<manifest>", f"category_counts[{cat}] = {lib.category_counts.get(cat, 0)}, "
                                      f"entries say {actual.get(cat, 0)}"))
    return out


_REQUIRED_KEYS = ("id", "file", "category", "anchor", "coverage", "source")


def load_manifest(path) -> LibraryManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LibraryError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("version"), int):
        raise LibraryError("manifest needs an integer 'version'")
    if not isinstance(doc.get("instances"), list):
        raise LibraryError("manifest needs an 'instances' array")

    base = path.parent
    instances = []
    seen = set()
    for rec in doc["instances"]:
        rid = rec.get("id") if isinstance(rec, dict) else None
        if not isinstance(rec, dict) or any(k not in rec for k in _REQUIRED_KEYS):
            missing = [k for k in _REQUIRED_KEYS if not isinstance(rec, dict) or k not in rec]
            raise LibraryError(f"instance record missing keys {missing}", rid)
        if rid in seen:
            raise LibraryError("duplicate id", rid)
        seen.add(rid)
        anchor = rec["anchor"]
        if not (isinstance(anchor, list) and len(anchor) == 4):
            raise LibraryError("anchor must be [x0, y0, x1, y1]", rid)
        file = base / rec["file"]
        if not file.is_file():
            raise LibraryError(f"image file missing: {rec['file']}", rid)
        pixels = read_png(file)
        if pixels.ndim != 3 or pixels.shape[2] != 4:
            raise LibraryError(f"{rec['file']} is not an RGBA image", rid)
        inst = OcclusionInstance(
            id=str(rid),
            pixels=pixels,
            category=str(rec["category"]),
            anchor=tuple(float(a) for a in anchor),
            coverage=float(rec["coverage"]),
            source=str(rec["source"]),
        )
        problems = validate_instance(inst)
        if problems:
            raise LibraryError("; ".join(problems), inst.id)
        instances.append(inst)

    counts = count_categories(instances)
    declared = doc.get("category_counts")
    if declared is not None:
        for cat in set(counts) | set(declared):
            if counts.get(cat, 0) != declared.get(cat, 0):
                raise LibraryError(f"category_counts inconsistent for {cat!r}")
    return LibraryManifest(version=doc["version"], instances=instances, category_counts=counts)


def save_manifest(lib: LibraryManifest, directory, name: str = "manifest.json") -> Path:
    directory = Path(directory)
    (directory / "instances").mkdir(parents=True, exist_ok=True)
    records = []
    for inst in lib.instances:
        rel = f"instances/{inst.id}.png"
        write_png(directory / rel, inst.pixels)
        records.append({
            "id": inst.id,
            "file": rel,
            "category": inst.category,
            "anchor": [float(a) for a in inst.anchor],
            "coverage": float(inst.coverage),
            "source": inst.source,
        })
    doc = {
        "version": lib.version,
        "instances": records,
        "category_counts": count_categories(lib.instances),
    }
    path = directory / name
    path.write_text(json.dumps(doc, indent=1))
    return path


def sample_instance(lib: LibraryManifest, rng: np.random.Generator,
                    strong_weight: float = 0.5) -> OcclusionInstance:
    """Draw a category (strong with probability ``strong_weight``), then an
    instance uniformly within it. An empty category hands its weight to the other."""
    if len(lib) == 0:
        raise LibraryError("cannot sample from an empty library")
    if not 0.0 <= strong_weight <= 1.0:
        raise ValueError(f"strong_weight must be in [0,1], got {strong_weight}")
    strong, weak = lib.by_category("strong"), lib.by_category("weak")
    if not strong:
        strong_weight = 0.0
    elif not weak:
        strong_weight = 1.0
    # Always consume two draws so the stream position does not depend on the branch.
    u, v = rng.random(2)
    pool = strong if u < strong_weight else weak
    return pool[min(int(v * len(pool)), len(pool) - 1)]


# --- procedural stand-in library -------------------------------------------------

def _instance_from_canvas(iid: str, rgb: np.ndarray, alpha: np.ndarray, source: str) -> OcclusionInstance:
    pixels = quantize(np.concatenate([rgb, alpha[..., None]], axis=2))
    a = pixels[..., 3]
    cov = alpha_coverage(a)
    rows = np.where(a.max(axis=1) > 0)[0]
    cols = np.where(a.max(axis=0) > 0)[0]
    h, w = a.shape
    anchor = (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)
    category = "strong" if cov >= STRONG_COVERAGE else "weak"
    return OcclusionInstance(iid, pixels, category, tuple(float(x) for x in anchor), cov, source)


def _textured(rng, h, w, color, amp=0.06):
    base = np.broadcast_to(np.asarray(color, dtype=np.float32), (h, w, 3))
    return np.clip(base + amp * rng.standard_normal((h, w, 1)).astype(np.float32), 0, 1)


def _draw_car(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    top = rng.uniform(0.4, 0.47) * h
    body = (yy >= top + 0.1 * h) & (yy < 0.93 * h)
    cx0, cx1 = rng.uniform(0.1, 0.3) * w, rng.uniform(0.7, 0.9) * w
    cabin = (yy >= top) & (yy < top + 0.1 * h) & (xx >= cx0) & (xx < cx1)
    alpha = (body | cabin).astype(np.float32)
    rgb = _textured(rng, h, w, rng.uniform(0.05, 0.95, 3))
    window = cabin & (yy >= top + 0.02 * h) & (xx >= cx0 + 2) & (xx < cx1 - 2)
    rgb[window] = (0.55, 0.65, 0.75)
    r = 0.09 * h
    for cx in (rng.uniform(0.15, 0.3) * w, rng.uniform(0.7, 0.85) * w):
        wheel = (yy - 0.9 * h) ** 2 + (xx - cx) ** 2 <= r * r
        alpha[wheel] = 1.0
        rgb[wheel] = 0.08
    return rgb, alpha


def _draw_wall(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    frac = rng.uniform(0.45, 0.62)
    left = rng.random() < 0.5
    region = xx < frac * w if left else xx >= (1 - frac) * w
    rgb = _textured(rng, h, w, rng.uniform(0.35, 0.75, 3) * np.array([1.0, 0.8, 0.7]))
    mortar = (yy % 8 == 0) | (((yy // 8) % 2 == 0) & (xx % 16 == 0)) | (((yy // 8) % 2 == 1) & (xx % 16 == 8))
    rgb[mortar] = 0.85
    return rgb, region.astype(np.float32)


def _draw_pole(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    width = rng.uniform(0.1, 0.2) * w
    x0 = rng.uniform(0.05, 0.95 - width / w) * w
    region = (xx >= x0) & (xx < x0 + width)
    rgb = _textured(rng, h, w, rng.uniform(0.1, 0.5, 3), amp=0.03)
    return rgb, region.astype(np.float32)


def _draw_barrier(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    y0 = rng.uniform(0.62, 0.72) * h
    height = rng.uniform(0.12, 0.2) * h
    region = (yy >= y0) & (yy < y0 + height)
    stripes = ((xx + yy) // 6) % 2 == 0
    c1, c2 = rng.uniform(0.6, 1.0, 3), rng.uniform(0.0, 0.3, 3)
    rgb = np.where(stripes[..., None], c1, c2).astype(np.float32)
    legs = (yy >= y0) & (yy < 0.98 * h) & ((np.abs(xx - 0.2 * w) < 2) | (np.abs(xx - 0.8 * w) < 2))
    return rgb, (region | legs).astype(np.float32)


def _draw_umbrella(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    cx = rng.uniform(0.35, 0.65) * w
    cy = rng.uniform(0.2, 0.26) * h
    r = rng.uniform(0.42, 0.55) * w
    ang = np.arctan2(yy - cy, xx - cx)
    canopy = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & (yy <= cy)
    handle = (np.abs(xx - cx) < 1.5) & (yy > cy) & (yy < cy + 0.2 * h)
    ribs = np.cos(ang * 8) > 0
    c = rng.uniform(0.1, 0.9, 3)
    rgb = np.where(ribs[..., None], c, c * 0.7).astype(np.float32)
    rgb[handle] = 0.1
    return rgb, (canopy | handle).astype(np.float32)


def _draw_bag(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    bw, bh = rng.uniform(0.22, 0.32) * w, rng.uniform(0.18, 0.26) * h
    left = rng.random() < 0.5
    x0 = 0.02 * w if left else w - bw - 0.02 * w
    y0 = rng.uniform(0.4, 0.55) * h
    region = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
    rgb = _textured(rng, h, w, rng.uniform(0.05, 0.6, 3), amp=0.04)
    return rgb, region.astype(np.float32)


_DRAWERS = {
    "car": (_draw_car, 5),
    "wall": (_draw_wall, 5),
    "pole": (_draw_pole, 4),
    "barrier": (_draw_barrier, 4),
    "umbrella": (_draw_umbrella, 3),
    "bag": (_draw_bag, 3),
}


def build_synthetic_library(seed: int = 0, height: int = 128, width: int = 64,
                            counts: Dict[str, int] | None = None) -> LibraryManifest:
    """Procedurally drawn occluders (cars, walls, poles, barriers, umbrellas, bags)."""
    rng = np.random.default_rng(seed)
    instances = []
    for kind, (draw, default_n) in _DRAWERS.items():
        n = default_n if counts is None else counts.get(kind, 0)
        for k in range(n):
            rgb, alpha = draw(rng, height, width)
            instances.append(_instance_from_canvas(
                f"{kind}_{k:02d}", rgb, alpha, f"synthetic:{kind}:seed={seed}"))
    return LibraryManifest(version=MANIFEST_VERSION, instances=instances)


def shipped_library_path() -> Path:
    """Manifest of the synthetic library bundled with the package
    (``build_synthetic_library()`` saved with ``save_manifest``)."""
    return Path(__file__).resolve().parent / "data" / "library" / "manifest.json"
