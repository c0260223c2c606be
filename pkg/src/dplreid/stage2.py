"""Stage 2: train the image side against the frozen, fused text features.

Batches are P identities x K images. Each image is occluded with probability
``augment.occlusion_ratio`` and then passes through flip / pad-crop / erase.
The loss is the plain sum of identity cross-entropy, batch-hard triplet and
image-to-text cross-entropy, all label-smoothed where applicable.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentConfig, TraditionalAugConfig, augment_sample, traditional_augment
from .losses import loss_i2tce, loss_id, loss_triplet
from .model import DPLReID, set_trainable, to_input
from .occlusion_library import LibraryManifest
from .rng import derive_rng
from .samples import ImageSample

log = logging.getLogger(__name__)

STAGE2_COLUMNS = ("epoch", "L_id", "L_tri", "L_i2tce", "total", "alpha", "beta")


@dataclass
class Stage2Config:
    P: int = 8
    K: int = 4
    epochs: int = 48
    lr: float = 3e-3
    warmup_epochs: int = 3
    warmup_factor: float = 0.01
    decay_epochs: Tuple[int, ...] = (29, 41)
    gamma: float = 0.1
    margin: float = 0.3
    eps: float = 0.1
    seed: int = 0
    template: str = "both"
    wgff: bool = True
    iters_per_epoch: int = 0  # 0: one pass over the training images
    traditional: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    trad: TraditionalAugConfig = field(default_factory=TraditionalAugConfig)

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must both be >= 2")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must be in [0,1)")
        if self.lr <= 0 or self.epochs < 0:
            raise ValueError("lr must be > 0 and epochs >= 0")
        if self.template not in ("full", "occ", "both"):
            raise ValueError(f"unknown template {self.template!r}")
        self.decay_epochs = tuple(self.decay_epochs)


def lr_at(cfg: Stage2Config, epoch: int) -> float:
    """Linear warmup from ``lr * warmup_factor``, then step decay. ``epoch`` is 1-based."""
    if cfg.warmup_epochs and epoch <= cfg.warmup_epochs:
        frac = (epoch - 1) / cfg.warmup_epochs
        return cfg.lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)
    return cfg.lr * cfg.gamma ** sum(epoch > d for d in cfg.decay_epochs)


def group_by_identity(samples: Sequence[ImageSample]) -> Dict[int, List[int]]:
    groups = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.person_id].append(i)
    return dict(sorted(groups.items()))


def pk_sample(samples: Sequence[ImageSample], P: int, K: int, rng: np.random.Generator,
              groups: Optional[Dict[int, List[int]]] = None) -> List[int]:
    """Indices of P distinct identities x K images, identity-major order.

    Identities with fewer than K images are drawn with replacement.
    """
    groups = groups if groups is not None else group_by_identity(samples)
    ids = list(groups)
    if len(ids) < P:
        raise ValueError(f"need at least P={P} identities, dataset has {len(ids)}")
    chosen = rng.choice(len(ids), size=P, replace=False)
    out = []
    for c in chosen:
        members = groups[ids[c]]
        pick = rng.choice(len(members), size=K, replace=len(members) < K)
        out.extend(members[j] for j in pick)
    return out


def stage2_terms(model: DPLReID, x: torch.Tensor, classes: torch.Tensor, cfg: Stage2Config) -> Dict[str, torch.Tensor]:
    _, f_v = model.fused_features(x, cfg.wgff)
    terms = {
        "L_id": loss_id(model.classifier(f_v), classes, cfg.eps),
        "L_tri": loss_triplet(f_v, classes, cfg.margin),
        "L_i2tce": loss_i2tce(f_v, model.text_bank(cfg.template), classes, cfg.eps, model.cfg.tau),
    }
    terms["total"] = terms["L_id"] + terms["L_tri"] + terms["L_i2tce"]
    return terms


def trainable_parameters(model: DPLReID, cfg: Stage2Config) -> List[torch.nn.Parameter]:
    set_trainable(model.frozen_modules(2), False)
    set_trainable([model.image_encoder, model.classifier], True)
    set_trainable([model.global_encoder], cfg.wgff)
    model.alpha_raw.requires_grad_(cfg.template == "both")
    model.beta_raw.requires_grad_(cfg.wgff and model.cfg.variant == "token")
    return [p for p in model.parameters() if p.requires_grad]


def prepare_batch(samples: Sequence[ImageSample], idx: Sequence[int], lib: Optional[LibraryManifest],
                  cfg: Stage2Config, rng: np.random.Generator) -> np.ndarray:
    out = []
    for i in idx:
        s = samples[i]
        if cfg.augment.occlusion_ratio > 0:
            s, _ = augment_sample(s, lib, cfg.augment, rng)
        px = traditional_augment(s.pixels, cfg.trad, rng) if cfg.traditional else s.pixels
        out.append(px)
    return np.stack(out).astype(np.float32)


def check_fusion_range(model: DPLReID) -> None:
    a, b = model.alpha.item(), model.beta.item()
    if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
        raise AssertionError(f"fusion weights left (0,1): alpha={a}, beta={b}")


def stage2_step(model: DPLReID, x: torch.Tensor, classes: torch.Tensor, cfg: Stage2Config,
                optimizer: torch.optim.Optimizer) -> Dict[str, float]:
    if not bool(model.text_full.abs().sum() > 0):
        raise RuntimeError("text features are empty; load a stage-1 checkpoint first")
    terms = stage2_terms(model, x, classes, cfg)
    optimizer.zero_grad()
    terms["total"].backward()
    optimizer.step()
    check_fusion_range(model)
    return {k: float(v.detach()) for k, v in terms.items()}


def run_stage2(cfg: Stage2Config, train: Sequence[ImageSample], lib: Optional[LibraryManifest],
               model: DPLReID, on_epoch=None):
    """Train in place; returns ``(model, rows)``. Row 0 is the loss before any update.

    ``on_epoch(epoch, model)`` runs after every epoch (e.g. for mid-training evaluation).
    """
    if cfg.augment.occlusion_ratio > 0 and (lib is None or len(lib) == 0):
        raise ValueError("occlusion ratio > 0 needs a non-empty occlusion library")
    unknown = {s.person_id for s in train} - set(model.cfg.id_map)
    if unknown:
        raise ValueError(f"training identities missing from the stage-1 checkpoint: {sorted(unknown)[:5]}")
    model.use_wgff.fill_(int(cfg.wgff))
    params = trainable_parameters(model, cfg)
    optimizer = torch.optim.Adam(params, lr=lr_at(cfg, 1))
    groups = group_by_identity(train)
    iters = cfg.iters_per_epoch or max(1, len(train) // (cfg.P * cfg.K))
    classes_all = model.class_index([s.person_id for s in train])
    rows = []
    model.train()
    for epoch in range(cfg.epochs + 1):
        # Epoch 0 measures the untouched model on its own sample/augment streams.
        rng = derive_rng(cfg.seed, 20, epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr_at(cfg, max(epoch, 1))
        sums = {k: 0.0 for k in STAGE2_COLUMNS[1:5]}
        for _ in range(iters):
            idx = pk_sample(train, cfg.P, cfg.K, rng, groups)
            x = to_input(prepare_batch(train, idx, lib, cfg, rng))
            classes = classes_all[torch.as_tensor(idx)]
            if epoch == 0:
                with torch.no_grad():
                    terms = {k: float(v) for k, v in stage2_terms(model, x, classes, cfg).items()}
            else:
                terms = stage2_step(model, x, classes, cfg, optimizer)
            for k in sums:
                sums[k] += terms[k]
        row = {"epoch": epoch, **{k: v / iters for k, v in sums.items()},
               "alpha": model.alpha.item(), "beta": model.beta.item()}
        rows.append(row)
        log.info("stage2 epoch %d total %.4f alpha %.3f beta %.3f", epoch, row["total"], row["alpha"], row["beta"])
        if on_epoch is not None and epoch > 0:
            on_epoch(epoch, model)
    model.eval()
    return model, rows
