"""Miniature dual encoder with learnable prompts and weighted gated fusion.

Stand-ins, all small enough for float64 finite-difference checks:

* ``ImageEncoder``: ``grid`` (three strided 3x3 convs, emits H/8 x W/8 x C) or
  ``token`` (8x8 patch embedding, class token, two attention blocks).
* ``GlobalEncoder``: large-kernel conv stack whose grid output is reshaped to
  the image encoder's intermediate layout.
* ``TextEncoder``: frozen two-block bidirectional attention stack over the
  template scaffold plus per-identity learnable tokens, pooled at the final token.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

TEMPLATES = ("full", "occ")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

# Scaffold words of the two prompt templates; "X" and "Y" mark learnable slots.
FULL_SCAFFOLD = ("a", "photo", "of", "a", "X", "person", ".")
OCC_SCAFFOLD = ("a", "photo", "of", "a", "X", "person", "is", "occluded", "by", "Y", ".")
VOCAB = ("a", "photo", "of", "person", "is", "occluded", "by", ".")


@dataclass
class ModelConfig:
    variant: str = "grid"
    num_ids: int = 2
    M: int = 4
    N: int = 4
    D: int = 32
    C: int = 32
    text_width: int = 32
    text_heads: int = 2
    text_layers: int = 2
    image_h: int = 64
    image_w: int = 32
    patch_size: int = 8
    kernel_size: int = 7
    tau: float = 0.07
    token_std: float = 0.02
    seed: int = 0
    id_map: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in ("grid", "token"):
            raise ValueError(f"variant must be 'grid' or 'token', got {self.variant!r}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError("image size must be a multiple of patch_size")
        if self.variant == "grid" and self.patch_size != 8:
            raise ValueError("grid variant downsamples by exactly 8")
        if not self.id_map:
            self.id_map = list(range(self.num_ids))
        if len(self.id_map) != self.num_ids:
            raise ValueError("id_map length must equal num_ids")

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size


# --- elementwise pieces --------------------------------------------------------

def logistic(x):
    return torch.sigmoid(x) if torch.is_tensor(x) else 1.0 / (1.0 + math.exp(-x))


def gated_fuse(f_clip: torch.Tensor, f_ls: torch.Tensor) -> torch.Tensor:
    """Gate backbone features with the sigmoid of the global-branch features."""
    if f_clip.shape != f_ls.shape:
        raise ValueError(f"shape mismatch {tuple(f_clip.shape)} vs {tuple(f_ls.shape)}")
    return f_clip * torch.sigmoid(f_ls)


def weighted_fuse(f_clip: torch.Tensor, f_ls: torch.Tensor, beta) -> torch.Tensor:
    if f_clip.shape != f_ls.shape:
        raise ValueError(f"shape mismatch {tuple(f_clip.shape)} vs {tuple(f_ls.shape)}")
    return beta * f_clip + (1.0 - beta) * f_ls


def similarity(u: torch.Tensor, v: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """Cosine similarity over the last axis scaled by 1/tau."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("similarity of a zero vector is undefined")
    return (u * v).sum(-1) / (nu * nv * tau)


def similarity_matrix(a: torch.Tensor, b: torch.Tensor, tau: float = 0.07) -> torch.Tensor:
    """``out[i, j] = similarity(a[i], b[j], tau)``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    na, nb = a.norm(dim=-1, keepdim=True), b.norm(dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("similarity of a zero vector is undefined")
    return (a / na) @ (b / nb).t() / tau


def fuse_text_features(f_full: torch.Tensor, f_occ: torch.Tensor, alpha) -> torch.Tensor:
    if f_full.shape != f_occ.shape:
        raise ValueError("full and occluded text features must come from the same identities")
    return alpha * f_full + (1.0 - alpha) * f_occ


def to_input(pixels, dtype=torch.float32) -> torch.Tensor:
    """B x H x W x 3 array in [0,1] -> normalized B x 3 x H x W tensor."""
    x = torch.as_tensor(np.ascontiguousarray(pixels), dtype=dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return ((x - PIXEL_MEAN) / PIXEL_STD).permute(0, 3, 1, 2).contiguous()


def check_image_batch(x: torch.Tensor, h: int, w: int) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, h, w):
        raise ValueError(f"expected B x 3 x {h} x {w} input, got {tuple(x.shape)}")


# --- building blocks -----------------------------------------------------------

class AttentionBlock(nn.Module):
    """Pre-norm self-attention plus MLP, no masking, no dropout."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        hd = w // self.heads
        q, k, v = (t.reshape(b, n, self.heads, hd).transpose(1, 2) for t in (q, k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, w)
        x = x + self.out(y)
        return x + self.mlp(self.ln2(x))


class ImageEncoder(nn.Module):
    """Backbone to an intermediate feature plus a pooled projection to D."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.variant = cfg.variant
        self.hw = (cfg.image_h, cfg.image_w)
        C = cfg.C
        if cfg.variant == "grid":
            self.backbone = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, C, 3, stride=2, padding=1),
            )
            self.proj = nn.Linear(C, cfg.D)
        else:
            gh, gw = cfg.grid_hw
            self.patch = nn.Conv2d(3, C, cfg.patch_size, stride=cfg.patch_size)
            self.cls = nn.Parameter(torch.randn(1, 1, C) * 0.02)
            self.pos = nn.Parameter(torch.randn(1, 1 + gh * gw, C) * 0.02)
            self.blocks = nn.Sequential(AttentionBlock(C, 2), AttentionBlock(C, 2))
            self.ln_post = nn.LayerNorm(C)
            self.proj = nn.Linear(C, cfg.D)

    def intermediate(self, x: torch.Tensor) -> torch.Tensor:
        check_image_batch(x, *self.hw)
        if self.variant == "grid":
            return self.backbone(x)
        t = self.patch(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls.expand(t.shape[0], -1, -1), t], dim=1) + self.pos
        return self.blocks(t)

    def project(self, f_x4: torch.Tensor) -> torch.Tensor:
        if self.variant == "grid":
            return self.proj(f_x4.mean(dim=(2, 3)))
        return self.proj(self.ln_post(f_x4[:, 0]))

    def forward(self, x):
        f = self.intermediate(x)
        return f, self.project(f)


class GlobalEncoder(nn.Module):
    """Large-kernel context branch emitting a grid aligned with the image encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.kernel_size
        self.variant = cfg.variant
        self.hw = (cfg.image_h, cfg.image_w)
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 16, k, stride=2, padding=k // 2), nn.GELU(),
            nn.Conv2d(16, 32, k, stride=2, padding=k // 2), nn.GELU(),
            nn.Conv2d(32, cfg.C, 3, stride=2, padding=1),
        )
        self.proj = nn.Linear(cfg.C, cfg.D)

    def grid(self, x: torch.Tensor) -> torch.Tensor:
        check_image_batch(x, *self.hw)
        g = self.backbone(x)
        if self.variant == "grid":
            return g
        # Token layout: pooled class slot followed by row-major patch cells.
        t = g.flatten(2).transpose(1, 2)
        return torch.cat([t.mean(dim=1, keepdim=True), t], dim=1)

    def project(self, f_x4: torch.Tensor) -> torch.Tensor:
        pooled = f_x4.mean(dim=(2, 3)) if self.variant == "grid" else f_x4[:, 0]
        return self.proj(pooled)

    def forward(self, x):
        f = self.grid(x)
        return f, self.project(f)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.text_width
        self.words = nn.Embedding(len(VOCAB), w)
        nn.init.normal_(self.words.weight, std=0.5)
        max_len = len(OCC_SCAFFOLD) - 2 + cfg.M + cfg.N
        self.pos = nn.Parameter(torch.randn(max_len, w) * 0.1)
        self.blocks = nn.Sequential(*[AttentionBlock(w, cfg.text_heads) for _ in range(cfg.text_layers)])
        self.ln_final = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.D)

    def word(self, token: str) -> torch.Tensor:
        return self.words.weight[VOCAB.index(token)]

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        x = seq + self.pos[: seq.shape[1]]
        x = self.blocks(x)
        return self.proj(self.ln_final(x[:, -1]))


class PromptState(nn.Module):
    """Per-identity learnable tokens; the two templates share nothing."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n, w = cfg.num_ids, cfg.text_width
        self.x_full = nn.Parameter(torch.randn(n, cfg.M, w) * cfg.token_std)
        self.x_occ = nn.Parameter(torch.randn(n, cfg.M, w) * cfg.token_std)
        self.y_occ = nn.Parameter(torch.randn(n, cfg.N, w) * cfg.token_std)


class DPLReID(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.text_encoder = TextEncoder(cfg)
            self.prompts = PromptState(cfg)
            self.image_encoder = ImageEncoder(cfg)
            self.global_encoder = GlobalEncoder(cfg)
            self.classifier = nn.Linear(cfg.D, cfg.num_ids, bias=False)
            nn.init.normal_(self.classifier.weight, std=0.01)
        self.alpha_raw = nn.Parameter(torch.zeros(()))
        self.beta_raw = nn.Parameter(torch.zeros(()))
        self.register_buffer("text_full", torch.zeros(cfg.num_ids, cfg.D))
        self.register_buffer("text_occ", torch.zeros(cfg.num_ids, cfg.D))
        self.register_buffer("use_wgff", torch.ones((), dtype=torch.int64))
        self._class_of = {pid: k for k, pid in enumerate(cfg.id_map)}

    # identities -------------------------------------------------------------
    def class_index(self, person_ids: Sequence[int]) -> torch.Tensor:
        try:
            return torch.tensor([self._class_of[int(p)] for p in person_ids], dtype=torch.long)
        except KeyError as exc:
            raise KeyError(f"unknown identity {exc.args[0]}") from None

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    @property
    def beta(self) -> torch.Tensor:
        return torch.sigmoid(self.beta_raw)

    # text -------------------------------------------------------------------
    def prompt_sequence(self, template: str, classes: torch.Tensor) -> torch.Tensor:
        if template == "full":
            scaffold, slots = FULL_SCAFFOLD, {"X": self.prompts.x_full}
        elif template == "occ":
            scaffold, slots = OCC_SCAFFOLD, {"X": self.prompts.x_occ, "Y": self.prompts.y_occ}
        else:
            raise ValueError(f"unknown template {template!r}")
        b = classes.shape[0]
        parts = []
        for tok in scaffold:
            if tok in slots:
                parts.append(slots[tok][classes])
            else:
                parts.append(self.text_encoder.word(tok).expand(b, 1, -1))
        return torch.cat(parts, dim=1)

    def encode_text(self, template: str, classes: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(self.prompt_sequence(template, classes))

    def all_text_features(self, template: str) -> torch.Tensor:
        return self.encode_text(template, torch.arange(self.cfg.num_ids))

    @torch.no_grad()
    def cache_text_features(self) -> None:
        self.text_full.copy_(self.all_text_features("full"))
        self.text_occ.copy_(self.all_text_features("occ"))

    def text_bank(self, template: str = "both") -> torch.Tensor:
        if template == "full":
            return self.text_full
        if template == "occ":
            return self.text_occ
        if template == "both":
            return fuse_text_features(self.text_full, self.text_occ, self.alpha)
        raise ValueError(f"unknown template {template!r}")

    # image ------------------------------------------------------------------
    def encode_clip(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.image_encoder(x)

    def encode_global(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.global_encoder(x)

    def fused_features(self, x: torch.Tensor, wgff: Optional[bool] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Intermediate and projected features after WGFF (sigmoid gating for
        the grid variant, beta weighting for the token variant)."""
        wgff = bool(self.use_wgff) if wgff is None else wgff
        clip_x4 = self.image_encoder.intermediate(x)
        if not wgff:
            return clip_x4, self.image_encoder.project(clip_x4)
        ls_x4 = self.global_encoder.grid(x)
        ls_proj = self.global_encoder.project(ls_x4)
        if self.cfg.variant == "grid":
            f_x4 = gated_fuse(clip_x4, ls_x4)
            f_v = gated_fuse(self.image_encoder.project(f_x4), ls_proj)
        else:
            f_x4 = weighted_fuse(clip_x4, ls_x4, self.beta)
            f_v = weighted_fuse(self.image_encoder.project(f_x4), ls_proj, self.beta)
        return f_x4, f_v

    def frozen_modules(self, stage: int) -> List[nn.Module]:
        if stage == 1:
            return [self.text_encoder, self.image_encoder]
        return [self.text_encoder, self.prompts]


def set_trainable(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


# --- checkpoint container --------------------------------------------------------

MAGIC = b"DPLRCKPT"
FORMAT_VERSION = 1
_DTYPES = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8"}
_TORCH_OF = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(path, model: DPLReID, meta: Optional[dict] = None) -> Path:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | raw tensors``.

    Tensors are little-endian, in sorted-name order, so equal models give equal bytes.
    """
    path = Path(path)
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy().astype(np.dtype(_DTYPES[t.dtype]).newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model": asdict(model.cfg),
        "variant": model.cfg.variant, "M": model.cfg.M, "N": model.cfg.N, "D": model.cfg.D,
        "tau": model.cfg.tau, "seed": model.cfg.seed,
        "meta": meta or {},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    return path


def _read_raw(path) -> Tuple[dict, bytes]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        return header, fh.read()


def read_header(path) -> dict:
    return _read_raw(path)[0]


def load_checkpoint(path) -> Tuple[DPLReID, dict]:
    header, data = _read_raw(path)
    model = DPLReID(ModelConfig(**header["model"]))
    state = {}
    for rec in header["tensors"]:
        chunk = data[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(rec["dtype"]).newbyteorder("<")).reshape(rec["shape"])
        state[rec["name"]] = torch.from_numpy(arr.astype(np.dtype(rec["dtype"]))).to(_TORCH_OF[rec["dtype"]])
    model.load_state_dict(state)
    return model, header.get("meta", {})
