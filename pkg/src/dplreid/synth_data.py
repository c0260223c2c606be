"""Procedural miniature pedestrian dataset with known identities and cameras.

Identities are three-part colour blocks (head, torso, legs) with an optional
torso pattern. Cameras change the background tint, brightness and whether the
image is mirrored. Train and evaluation identities are disjoint.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from .samples import ImageSample, quantize


@dataclass(frozen=True)
class DatasetConfig:
    num_ids: int = 64
    cams: int = 3
    samples_per_id_per_cam: int = 4
    image_h: int = 64
    image_w: int = 32
    query_frac: float = 0.5
    seed: int = 0
    camera_offset_step: float = 0.05
    color_jitter: float = 0.06
    noise_std: float = 0.03

    def __post_init__(self):
        if self.num_ids < 2:
            raise ValueError("num_ids must be >= 2")
        if self.cams < 2:
            raise ValueError("cams must be >= 2 so every query has a cross-camera match")
        if self.image_h != 2 * self.image_w:
            raise ValueError("image_h must equal 2 * image_w")
        if self.samples_per_id_per_cam < 1:
            raise ValueError("samples_per_id_per_cam must be >= 1")
        if not 0.0 < self.query_frac < 1.0:
            raise ValueError("query_frac must be in (0,1)")
        n_eval = self.num_eval_ids
        if n_eval < 1 or self.num_ids - n_eval < 1:
            raise ValueError(f"query_frac={self.query_frac} leaves an empty train or eval split")

    @property
    def num_eval_ids(self) -> int:
        return int(round(self.num_ids * self.query_frac))

    def camera_offset(self, camera_id: int) -> float:
        return self.camera_offset_step * (camera_id - (self.cams - 1) / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IdentitySpec:
    person_id: int
    part_colors: Tuple[Tuple[float, float, float], ...]  # head, torso, legs
    pattern_seed: int
    height_frac: Tuple[float, float]  # head and torso share of the body height
    width_frac: float


def _id_rng(cfg: DatasetConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *keys]))


def generate_identity(cfg: DatasetConfig, person_id: int, rng: np.random.Generator | None = None) -> IdentitySpec:
    if not 0 <= person_id < cfg.num_ids:
        raise ValueError(f"person_id {person_id} outside [0, {cfg.num_ids})")
    rng = rng if rng is not None else _id_rng(cfg, 1, person_id)
    colors = tuple(tuple(float(c) for c in rng.uniform(0.08, 0.92, 3)) for _ in range(3))
    return IdentitySpec(
        person_id=person_id,
        part_colors=colors,
        pattern_seed=int(rng.integers(0, 2**31 - 1)),
        height_frac=(float(rng.uniform(0.16, 0.22)), float(rng.uniform(0.34, 0.42))),
        width_frac=float(rng.uniform(0.45, 0.6)),
    )


def _camera_background(cfg: DatasetConfig, camera_id: int, h: int, w: int) -> np.ndarray:
    crng = _id_rng(cfg, 2, camera_id)
    tint = crng.uniform(-0.08, 0.08, 3)
    tint -= tint.mean()  # zero-sum tint keeps the mean brightness at the base level
    yy = np.linspace(-1.0, 1.0, h)[:, None, None]
    grad = 0.05 * yy * crng.choice([-1.0, 1.0])
    return (0.5 + tint[None, None, :] + grad + np.zeros((h, w, 3))).astype(np.float32)


def render_sample(spec: IdentitySpec, camera_id: int, rng: np.random.Generator,
                  cfg: DatasetConfig = DatasetConfig(), index: int = 0, split: str = "train") -> ImageSample:
    h, w = cfg.image_h, cfg.image_w
    # Draw everything up front so the rng stream is identical for every camera.
    shift_x, shift_y = rng.uniform(-0.08, 0.08, 2)
    scale = rng.uniform(0.9, 1.0)
    jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter, (3, 3))
    noise = rng.standard_normal((h, w, 3)).astype(np.float32) * cfg.noise_std

    img = _camera_background(cfg, camera_id, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    body_h = 0.9 * h * scale
    top = (h - body_h) / 2 + shift_y * h
    cx = w / 2 + shift_x * w
    half_w = spec.width_frac * w / 2
    head_end = top + spec.height_frac[0] * body_h
    torso_end = head_end + spec.height_frac[1] * body_h
    bottom = top + body_h

    colors = np.clip(np.asarray(spec.part_colors) + jitter, 0.0, 1.0)
    head = (yy >= top) & (yy < head_end) & (np.abs(xx - cx) < half_w * 0.55)
    torso = (yy >= head_end) & (yy < torso_end) & (np.abs(xx - cx) < half_w)
    legs = (yy >= torso_end) & (yy < bottom) & (np.abs(xx - cx) < half_w * 0.8) & (np.abs(xx - cx) > 1)
    img[head] = colors[0]
    img[torso] = colors[1]
    img[legs] = colors[2]

    # Torso pattern: stripes or an off-centre patch, chosen by the identity.
    prng = np.random.default_rng(spec.pattern_seed)
    kind = prng.integers(0, 3)
    accent = prng.uniform(0.05, 0.95, 3)
    if kind == 1:
        period = int(prng.integers(3, 6))
        stripes = torso & (((yy - int(head_end)) // period) % 2 == 0)
        img[stripes] = 0.6 * colors[1] + 0.4 * accent
    elif kind == 2:
        side = 1.0 if prng.random() < 0.5 else -1.0
        patch = torso & ((xx - cx) * side > 0) & (yy < (head_end + torso_end) / 2)
        img[patch] = accent

    if camera_id % 2 == 1:
        img = img[:, ::-1]
    img = img + cfg.camera_offset(camera_id) + noise
    pixels = quantize(np.clip(img, 0.0, 1.0))
    return ImageSample(pixels=pixels, person_id=spec.person_id, camera_id=camera_id,
                       occluded=False, split=split, index=index)


def build_dataset(cfg: DatasetConfig) -> Dict[str, List[ImageSample]]:
    """Open-set split: the first ``num_ids - num_eval_ids`` identities train,
    the rest are split into query and gallery.

    Query takes sample 0 of every camera (only camera 0 when there is a single
    sample per camera); gallery takes the remainder, so each query keeps at
    least one cross-camera match.
    """
    n_train = cfg.num_ids - cfg.num_eval_ids
    spc = cfg.samples_per_id_per_cam
    out: Dict[str, List[ImageSample]] = {"train": [], "query": [], "gallery": []}
    for pid in range(cfg.num_ids):
        spec = generate_identity(cfg, pid)
        for cam in range(cfg.cams):
            for k in range(spc):
                rng = _id_rng(cfg, 3, pid, cam, k)
                if pid < n_train:
                    split = "train"
                elif k == 0 and (spc > 1 or cam == 0):
                    split = "query"
                else:
                    split = "gallery"
                out[split].append(render_sample(spec, cam, rng, cfg, index=k, split=split))
    return out
