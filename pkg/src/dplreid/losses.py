"""Training objectives.

Stage 1: image-to-text and text-to-image contrastive terms.
Stage 2: label-smoothed identity cross-entropy, batch-hard triplet, and
label-smoothed image-to-text cross-entropy against the fused text bank.
"""

from __future__ import annotations

from typing import Tuple

import torch
import torch.nn.functional as F

from .model import similarity_matrix


# --- stage 1 -------------------------------------------------------------------

def i2t_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """``logits[i, a] = s(f_v^i, f_t^{y_a})``; the target of row i is column i."""
    if logits.dim() != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError("i2t logits must be a square B x B matrix")
    return -torch.diagonal(torch.log_softmax(logits, dim=1)).mean()


def loss_i2t(f_v: torch.Tensor, f_t: torch.Tensor, labels: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Row i of ``f_t`` is the text feature of ``labels[i]``."""
    if f_v.shape != f_t.shape or f_v.shape[0] != len(labels):
        raise ValueError(f"dimension mismatch: {tuple(f_v.shape)}, {tuple(f_t.shape)}, {len(labels)} labels")
    return i2t_from_logits(similarity_matrix(f_v, f_t, tau))


def t2i_single(scores: torch.Tensor, positives: torch.Tensor) -> torch.Tensor:
    """``scores[a] = s(f_v^a, f_t^y)`` over the batch images; ``positives`` masks P(y)."""
    if not bool(positives.any()):
        raise ValueError("empty positive set")
    logp = torch.log_softmax(scores, dim=0)
    return -logp[positives].mean()


def t2i_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``logits[a, j] = s(f_v^a, f_t^{y_j})``; averaged over distinct identities."""
    labels = torch.as_tensor(labels)
    terms = []
    for y in torch.unique(labels):
        j = int(torch.nonzero(labels == y)[0])
        terms.append(t2i_single(logits[:, j], labels == y))
    return torch.stack(terms).mean()


def loss_t2i(f_v: torch.Tensor, f_t: torch.Tensor, labels: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    if f_v.shape != f_t.shape or f_v.shape[0] != len(labels):
        raise ValueError("dimension mismatch")
    return t2i_from_logits(similarity_matrix(f_v, f_t, tau), labels)


def loss_t2i_identity(f_v: torch.Tensor, f_t_y: torch.Tensor, y: int, labels: torch.Tensor,
                      tau: float = 0.07) -> torch.Tensor:
    """Per-identity form: one text feature against every image in the batch."""
    scores = similarity_matrix(f_v, f_t_y.unsqueeze(0), tau)[:, 0]
    return t2i_single(scores, torch.as_tensor(labels) == y)


# --- stage 2 -------------------------------------------------------------------

def smoothed_targets(y: torch.Tensor, n: int, eps: float, dtype=torch.float32) -> torch.Tensor:
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must be in [0,1)")
    y = torch.as_tensor(y).reshape(-1)
    if bool((y < 0).any()) or bool((y >= n).any()):
        raise ValueError(f"class id outside [0, {n})")
    q = torch.full((y.shape[0], n), eps / n, dtype=dtype)
    q[torch.arange(y.shape[0]), y] += 1.0 - eps
    return q


def smoothed_cross_entropy(logits: torch.Tensor, y, eps: float) -> torch.Tensor:
    """``-sum_k q_k log p_k`` with ``q = (1-eps) onehot(y) + eps/N``, batch mean."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    n = logits.shape[1]
    if n < 2:
        raise ValueError("need at least two classes")
    q = smoothed_targets(y, n, eps, logits.dtype)
    return -(q * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def loss_id(logits: torch.Tensor, y, eps: float = 0.1) -> torch.Tensor:
    return smoothed_cross_entropy(logits, y, eps)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    """Distances whose gradient is zero (not NaN) wherever two points coincide."""
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    zero = sq <= 0
    safe = torch.where(zero, torch.ones_like(sq), sq)
    return torch.where(zero, torch.zeros_like(sq), safe.sqrt())


def hard_pairs(embeds: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per anchor: farthest same-identity sample and nearest other-identity sample."""
    labels = torch.as_tensor(labels).reshape(-1)
    d = pairwise_euclidean(embeds)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    pos = same & ~torch.eye(len(labels), dtype=torch.bool)
    neg = ~same
    if not bool(pos.any(1).all()) or not bool(neg.any(1).all()):
        raise ValueError("every identity needs a positive and a negative in the batch")
    d_p = d.masked_fill(~pos, float("-inf")).max(dim=1).values
    d_n = d.masked_fill(~neg, float("inf")).min(dim=1).values
    return d_p, d_n


def triplet_hinge(d_p: torch.Tensor, d_n: torch.Tensor, margin: float) -> torch.Tensor:
    return F.relu(d_p - d_n + margin)


def loss_triplet(embeds: torch.Tensor, labels, margin: float = 0.3) -> torch.Tensor:
    if margin < 0:
        raise ValueError("margin must be >= 0")
    d_p, d_n = hard_pairs(embeds, labels)
    return triplet_hinge(d_p, d_n, margin).mean()


def loss_i2tce(f_v: torch.Tensor, text_bank: torch.Tensor, y, eps: float = 0.1, tau: float = 0.07) -> torch.Tensor:
    if f_v.dim() == 1:
        f_v = f_v.unsqueeze(0)
    if f_v.shape[1] != text_bank.shape[1]:
        raise ValueError("feature width differs from the text bank")
    return smoothed_cross_entropy(similarity_matrix(f_v, text_bank, tau), y, eps)
