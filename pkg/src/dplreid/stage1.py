"""Stage 1: learn the identity prompts against frozen encoders.

The image encoder is first warmed up on identity classification (a stand-in
for vision-language pretraining) and frozen. The full-body prompts are then
fitted on clean images and the occlusion prompts on freshly occluded copies
of the same batch, with the four contrastive terms summed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentConfig, augment_sample
from .losses import loss_i2t, loss_t2i, smoothed_cross_entropy
from .model import DPLReID, ModelConfig, set_trainable, to_input
from .occlusion_library import LibraryManifest
from .rng import derive_rng
from .samples import ImageSample

log = logging.getLogger(__name__)

STAGE1_COLUMNS = ("epoch", "L_i2t_full", "L_t2i_full", "L_i2t_occ", "L_t2i_occ", "total")


@dataclass
class Stage1Config:
    batch_size: int = 16
    epochs: int = 30
    lr: float = 5e-3
    min_lr: float = 1e-5
    seed: int = 0
    template: str = "both"
    warmup_epochs: int = 10
    warmup_lr: float = 2e-3
    warmup_batch: int = 32
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.template not in ("full", "occ", "both"):
            raise ValueError(f"unknown template {self.template!r}")
        # The occlusion branch always sees an occluded copy.
        self.augment = replace(self.augment, occlusion_ratio=1.0)

    @property
    def branches(self) -> tuple:
        return {"full": ("full",), "occ": ("occ",), "both": ("full", "occ")}[self.template]


def cosine_lr(base: float, floor: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * step / total))


def chunks(idx: np.ndarray, size: int, min_size: int = 2) -> List[np.ndarray]:
    out = [idx[i:i + size] for i in range(0, len(idx), size)]
    return [c for c in out if len(c) >= min_size]


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    return np.stack([s.pixels for s in samples]).astype(np.float32)


@torch.no_grad()
def image_embeddings(encoder: nn.Module, pixels: np.ndarray, batch: int = 128,
                     dtype=torch.float32) -> torch.Tensor:
    out = []
    for i in range(0, len(pixels), batch):
        out.append(encoder(to_input(pixels[i:i + batch], dtype))[1])
    return torch.cat(out) if out else torch.zeros(0)


def warmup_encoders(model: DPLReID, samples: Sequence[ImageSample], cfg: Stage1Config) -> List[float]:
    """Fit image and global encoders on identity classification of clean images.

    Each encoder gets its own throwaway linear head. Returns per-epoch mean losses.
    """
    if cfg.warmup_epochs == 0:
        return []
    pixels = stack_pixels(samples)
    classes = model.class_index([s.person_id for s in samples])
    rng = derive_rng(cfg.seed, 10)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        heads = nn.ModuleList([nn.Linear(model.cfg.D, model.cfg.num_ids) for _ in range(2)])
    encoders = [model.image_encoder, model.global_encoder]
    params = [p for m in encoders for p in m.parameters()] + list(heads.parameters())
    opt = torch.optim.Adam(params, lr=cfg.warmup_lr)
    history = []
    for epoch in range(cfg.warmup_epochs):
        perm = rng.permutation(len(samples))
        flips = rng.random(len(samples)) < 0.5
        total, count = 0.0, 0
        for idx in chunks(perm, cfg.warmup_batch):
            px = pixels[idx].copy()
            px[flips[idx]] = px[flips[idx]][:, :, ::-1]
            x = to_input(px)
            loss = sum(smoothed_cross_entropy(head(enc(x)[1]), classes[idx], 0.1)
                       for enc, head in zip(encoders, heads))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
        log.debug("warmup epoch %d loss %.4f", epoch + 1, history[-1])
    return history


def check_frozen(model: DPLReID, stage: int) -> None:
    for module in model.frozen_modules(stage):
        if any(p.requires_grad for p in module.parameters()):
            raise RuntimeError(f"stage {stage}: {type(module).__name__} must be frozen")


def stage1_terms(model: DPLReID, f_clean: Optional[torch.Tensor], f_occ: Optional[torch.Tensor],
                 classes: torch.Tensor, branches=("full", "occ")) -> Dict[str, torch.Tensor]:
    """The four contrastive terms; absent branches contribute zero."""
    tau = model.cfg.tau
    zero = model.prompts.x_full.new_zeros(())
    terms = {k: zero for k in STAGE1_COLUMNS[1:5]}
    if "full" in branches:
        f_t = model.encode_text("full", classes)
        terms["L_i2t_full"] = loss_i2t(f_clean, f_t, classes, tau)
        terms["L_t2i_full"] = loss_t2i(f_clean, f_t, classes, tau)
    if "occ" in branches:
        f_t = model.encode_text("occ", classes)
        terms["L_i2t_occ"] = loss_i2t(f_occ, f_t, classes, tau)
        terms["L_t2i_occ"] = loss_t2i(f_occ, f_t, classes, tau)
    terms["total"] = sum(terms[k] for k in STAGE1_COLUMNS[1:5])
    return terms


def stage1_step(model: DPLReID, f_clean, f_occ, classes, optimizer, branches=("full", "occ")) -> Dict[str, float]:
    check_frozen(model, 1)
    terms = stage1_terms(model, f_clean, f_occ, classes, branches)
    optimizer.zero_grad()
    terms["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in terms.items()}


def occlude_all(samples: Sequence[ImageSample], lib: LibraryManifest, aug: AugmentConfig,
                rng: np.random.Generator) -> np.ndarray:
    out = [augment_sample(s, lib, aug, rng)[0].pixels for s in samples]
    return np.stack(out).astype(np.float32)


def build_model(cfg: ModelConfig) -> DPLReID:
    return DPLReID(cfg)


def run_stage1(cfg: Stage1Config, train: Sequence[ImageSample], lib: Optional[LibraryManifest],
               model_cfg: ModelConfig):
    """Warm up and freeze the encoders, then fit the prompts.

    Returns ``(model, rows)`` where rows form the per-epoch loss log; row 0 is
    the objective at initialisation.
    """
    ids = sorted({s.person_id for s in train})
    if len(ids) < 2:
        raise ValueError("stage 1 needs at least two training identities")
    if "occ" in cfg.branches and (lib is None or len(lib) == 0):
        raise ValueError("the occlusion prompt branch needs a non-empty occlusion library")
    model = build_model(replace(model_cfg, num_ids=len(ids), id_map=ids))
    warmup_encoders(model, train, cfg)
    set_trainable(model.frozen_modules(1), False)
    set_trainable([model.global_encoder, model.classifier], False)
    model.alpha_raw.requires_grad_(False)
    model.beta_raw.requires_grad_(False)
    model.eval()

    pixels = stack_pixels(train)
    classes = model.class_index([s.person_id for s in train])
    f_clean = image_embeddings(model.image_encoder, pixels)
    optimizer = torch.optim.Adam(model.prompts.parameters(), lr=cfg.lr)
    shuffle_rng = derive_rng(cfg.seed, 12)
    steps_per_epoch = len(chunks(np.arange(len(train)), cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs

    def epoch_views(epoch):
        perm = shuffle_rng.permutation(len(train))
        f_occ = None
        if "occ" in cfg.branches:
            occ_px = occlude_all(train, lib, cfg.augment, derive_rng(cfg.seed, 11, epoch))
            f_occ = image_embeddings(model.image_encoder, occ_px)
        return perm, f_occ

    rows = []
    step = 0
    for epoch in range(cfg.epochs + 1):
        perm, f_occ = epoch_views(epoch)
        sums = {k: 0.0 for k in STAGE1_COLUMNS[1:]}
        nb = 0
        for idx in chunks(perm, cfg.batch_size):
            idx_t = torch.as_tensor(idx)
            fo = f_occ[idx_t] if f_occ is not None else None
            if epoch == 0:
                with torch.no_grad():
                    terms = {k: float(v) for k, v in
                             stage1_terms(model, f_clean[idx_t], fo, classes[idx_t], cfg.branches).items()}
            else:
                for g in optimizer.param_groups:
                    g["lr"] = cosine_lr(cfg.lr, cfg.min_lr, step, total_steps)
                terms = stage1_step(model, f_clean[idx_t], fo, classes[idx_t], optimizer, cfg.branches)
                step += 1
            for k in sums:
                sums[k] += terms[k]
            nb += 1
        row = {"epoch": epoch, **{k: v / max(nb, 1) for k, v in sums.items()}}
        rows.append(row)
        log.info("stage1 epoch %d total %.4f", epoch, row["total"])
    model.cache_text_features()
    return model, rows
