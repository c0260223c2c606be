"""Real-world occlusion augmentation plus the conventional stage-2 augmentations.

The occlusion path is: pick an instance, resize its full-frame canvas to the
pedestrian image, feather the alpha, alpha-blend, then match the per-channel
mean/std of the composite to the clean image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .occlusion_library import LibraryError, LibraryManifest, OcclusionInstance, sample_instance
from .samples import ImageSample

FEATHER_TRUNCATE = 4.0


@dataclass(frozen=True)
class AugmentConfig:
    occlusion_ratio: float = 0.5
    feather_radius_frac: float = 0.02
    align_epsilon: float = 1e-6
    strong_weight: float = 0.5
    clamp_output: bool = True
    align: bool = True

    def __post_init__(self):
        if not 0.0 <= self.occlusion_ratio <= 1.0:
            raise ValueError(f"occlusion_ratio must be in [0,1], got {self.occlusion_ratio}")
        if not 0.0 <= self.strong_weight <= 1.0:
            raise ValueError(f"strong_weight must be in [0,1], got {self.strong_weight}")
        if self.feather_radius_frac < 0:
            raise ValueError("feather_radius_frac must be >= 0")
        if self.align_epsilon <= 0:
            raise ValueError("align_epsilon must be > 0")

    def feather_radius(self, height: int) -> float:
        if self.feather_radius_frac == 0:
            return 0.0
        return max(1.0, self.feather_radius_frac * height)


def resize_to_target(inst: OcclusionInstance, h: int, w: int, method: str = "bilinear") -> OcclusionInstance:
    if h < 8 or w < 8:
        raise ValueError(f"degenerate target size {h}x{w}")
    if inst.pixels.shape[:2] == (h, w):
        return replace(inst, pixels=inst.pixels.copy())
    resample = {"bilinear": Image.BILINEAR, "nearest": Image.NEAREST}[method]
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(inst.pixels[..., c], dtype=np.float32), mode="F")
                   .resize((w, h), resample=resample))
        for c in range(4)
    ]
    pixels = np.clip(np.stack(chans, axis=2), 0.0, 1.0).astype(np.float32)
    return replace(inst, pixels=pixels)


def feather_alpha(alpha: np.ndarray, radius: float) -> np.ndarray:
    """Gaussian blur of the matte with std ``radius`` (edge-replicated borders)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return alpha.copy()
    out = gaussian_filter(alpha.astype(np.float64), sigma=radius, mode="nearest", truncate=FEATHER_TRUNCATE)
    return np.clip(out, 0.0, 1.0).astype(alpha.dtype)


def blend(base_rgb: np.ndarray, occ_rgb: np.ndarray, a: np.ndarray) -> np.ndarray:
    a = a[..., None]
    return a * occ_rgb + (1.0 - a) * base_rgb


def composite(base: ImageSample, inst: OcclusionInstance, cfg: AugmentConfig = AugmentConfig()) -> ImageSample:
    if inst.pixels.shape[:2] != base.pixels.shape[:2]:
        raise ValueError(f"instance {inst.id} is {inst.pixels.shape[:2]}, image is {base.pixels.shape[:2]}")
    a = feather_alpha(inst.alpha, cfg.feather_radius(base.pixels.shape[0]))
    out = blend(base.pixels, inst.rgb, a).astype(np.float32)
    if cfg.clamp_output:
        out = np.clip(out, 0.0, 1.0)
    occluded = bool(a.max() > 0)
    return replace(base, pixels=out, occluded=occluded or base.occluded,
                   occlusion_mask=a.astype(np.float32) if occluded else base.occlusion_mask)


def channel_moments(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    flat = img.reshape(-1, img.shape[-1]).astype(np.float64)
    return flat.mean(axis=0), flat.std(axis=0)


def align_distribution(occ: np.ndarray, clean: np.ndarray, eps: float = 1e-6, clamp: bool = True) -> np.ndarray:
    """Standardize ``occ`` per channel, then rescale to ``clean``'s mean and
    population std. ``eps`` is added to the occluded std."""
    if occ.shape != clean.shape:
        raise ValueError(f"shape mismatch {occ.shape} vs {clean.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    mu_o, sd_o = channel_moments(occ)
    mu_c, sd_c = channel_moments(clean)
    z = (occ.astype(np.float64) - mu_o) / (sd_o + eps)
    out = z * sd_c + mu_c
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(occ.dtype)


def augment_sample(s: ImageSample, lib: Optional[LibraryManifest], cfg: AugmentConfig,
                   rng: np.random.Generator) -> Tuple[ImageSample, Optional[str]]:
    """Occlude ``s`` with probability ``cfg.occlusion_ratio``.

    Returns the (possibly unchanged) sample and the id of the instance used.
    """
    if s.occluded:
        raise ValueError("sample is already occluded")
    if rng.random() >= cfg.occlusion_ratio:
        return s, None
    if lib is None or len(lib) == 0:
        raise LibraryError("occlusion fired but the library is empty")
    inst = sample_instance(lib, rng, cfg.strong_weight)
    h, w = s.pixels.shape[:2]
    occ = composite(s, resize_to_target(inst, h, w), cfg)
    if cfg.align:
        occ = replace(occ, pixels=align_distribution(occ.pixels, s.pixels, cfg.align_epsilon, cfg.clamp_output))
    return occ, inst.id


# --- conventional augmentation (stage 2 only) -------------------------------------

@dataclass(frozen=True)
class TraditionalAugConfig:
    flip_prob: float = 0.5
    pad: int = 4
    erase_prob: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.3)
    erase_aspect: Tuple[float, float] = (0.3, 3.3)


def traditional_augment(pixels: np.ndarray, cfg: TraditionalAugConfig, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip, pad-then-random-crop, random erasing with noise fill."""
    h, w, _ = pixels.shape
    # Fixed draw count keeps the stream aligned across branches.
    u_flip, u_erase, u_area, u_aspect, u_x, u_y = rng.random(6)
    dy, dx = rng.integers(0, 2 * cfg.pad + 1, size=2) if cfg.pad > 0 else (0, 0)
    fill = rng.random((h, w, 3)).astype(np.float32)
    out = pixels
    if u_flip < cfg.flip_prob:
        out = out[:, ::-1]
    if cfg.pad > 0:
        padded = np.pad(out, ((cfg.pad, cfg.pad), (cfg.pad, cfg.pad), (0, 0)), mode="constant")
        out = padded[dy:dy + h, dx:dx + w]
    out = np.ascontiguousarray(out, dtype=np.float32)
    if u_erase < cfg.erase_prob:
        area = h * w * (cfg.erase_area[0] + u_area * (cfg.erase_area[1] - cfg.erase_area[0]))
        lo, hi = np.log(cfg.erase_aspect[0]), np.log(cfg.erase_aspect[1])
        aspect = np.exp(lo + u_aspect * (hi - lo))
        eh = int(min(h, round(np.sqrt(area * aspect))))
        ew = int(min(w, round(np.sqrt(area / aspect))))
        if eh > 0 and ew > 0:
            y0 = int(u_y * (h - eh + 1))
            x0 = int(u_x * (w - ew + 1))
            out[y0:y0 + eh, x0:x0 + ew] = fill[y0:y0 + eh, x0:x0 + ew]
    return out
