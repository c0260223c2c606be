"""Embedding extraction and camera-aware CMC / mAP."""

from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentConfig, augment_sample
from .model import DPLReID, to_input
from .occlusion_library import LibraryManifest
from .rng import derive_rng
from .samples import ImageSample

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: List[float]
    excluded_queries: int = 0
    metric: str = "cosine"

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        ranks = {str(k): self.rank(k) for k in (1, 5, 10) if len(self.cmc)}
        return {
            "map": float(self.map),
            "cmc": [float(c) for c in self.cmc],
            "rank": ranks,
            "excluded_queries": int(self.excluded_queries),
            "per_query_ap": [float(a) for a in self.per_query_ap],
            "metric": self.metric,
        }


@torch.no_grad()
def extract_embeddings(model: DPLReID, samples: Sequence[ImageSample], batch: int = 128
                       ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fused projected features, one row per sample in input order."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch):
        px = np.stack([s.pixels for s in samples[i:i + batch]])
        out.append(model.fused_features(to_input(px))[1].numpy())
    feats = np.concatenate(out) if out else np.zeros((0, model.cfg.D), np.float32)
    ids = np.array([s.person_id for s in samples], dtype=np.int64)
    cams = np.array([s.camera_id for s in samples], dtype=np.int64)
    return feats, ids, cams


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero embedding vector")
    return x / n


def score_matrix(q: np.ndarray, g: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Higher is better: cosine similarity or negated Euclidean distance."""
    if metric == "cosine":
        return _normalize(np.atleast_2d(q)) @ _normalize(np.atleast_2d(g)).T
    if metric == "euclidean":
        q, g = np.atleast_2d(q).astype(np.float64), np.atleast_2d(g).astype(np.float64)
        d2 = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2 * q @ g.T
        return -np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties broken by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def rank_list(q: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    if len(gallery) < 1:
        raise ValueError("empty gallery")
    return rank_scores(score_matrix(q, gallery, metric)[0])


def average_precision(hits: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of relevant items.

    Summed in exact rationals so the result is the correctly rounded value.
    """
    ranks = np.flatnonzero(np.asarray(hits, dtype=bool)) + 1
    if len(ranks) == 0:
        return 0.0
    total = sum(Fraction(k, int(r)) for k, r in enumerate(ranks, start=1))
    return float(total / len(ranks))


def evaluate_scores(scores: np.ndarray, q_ids, q_cams, g_ids, g_cams, metric: str = "cosine") -> EvalReport:
    q_ids, q_cams, g_ids, g_cams = map(np.asarray, (q_ids, q_cams, g_ids, g_cams))
    m = len(g_ids)
    cmc_sum = np.zeros(m)
    aps = []
    excluded = 0
    for i in range(len(q_ids)):
        order = rank_scores(scores[i])
        keep = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        hits = (g_ids[order] == q_ids[i])[keep]
        if not hits.any():
            excluded += 1
            continue
        first = int(np.argmax(hits))
        cmc_sum[first:] += 1
        aps.append(average_precision(hits))
    if excluded:
        log.warning("%d queries have no cross-camera match and were excluded", excluded)
    n = len(aps)
    cmc = cmc_sum / n if n else cmc_sum
    return EvalReport(cmc=cmc, map=float(np.mean(aps)) if n else 0.0, per_query_ap=aps,
                      excluded_queries=excluded, metric=metric)


def compute_cmc_map(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams, metric: str = "cosine") -> EvalReport:
    """Market-1501 protocol: same identity seen by the same camera is ignored."""
    return evaluate_scores(score_matrix(q_feats, g_feats, metric), q_ids, q_cams, g_ids, g_cams, metric)


def occlude_eval_samples(samples: Sequence[ImageSample], lib: LibraryManifest, ratio: float, seed: int,
                         cfg: AugmentConfig = AugmentConfig(), stream: int = 0) -> List[ImageSample]:
    """Occlude query or gallery images with the training-time operator at ``ratio``.

    Moment alignment follows ``cfg.align``. Each image draws from its own
    stream keyed by ``(seed, stream, position)``, so query and gallery
    (different ``stream``) never share occluder draws.
    """
    cfg = replace(cfg, occlusion_ratio=ratio)
    return [augment_sample(s, lib, cfg, derive_rng(seed, 30, stream, i))[0] for i, s in enumerate(samples)]


def evaluate_model(model: DPLReID, query: Sequence[ImageSample], gallery: Sequence[ImageSample],
                   metric: str = "cosine") -> EvalReport:
    qf, qi, qc = extract_embeddings(model, query)
    gf, gi, gc = extract_embeddings(model, gallery)
    return compute_cmc_map(qf, qi, qc, gf, gi, gc, metric)
