"""Segmentation losses (BCE, Dice) and the supervised prototypical contrastive
terms computed on the bottleneck embedding map.

Contrastive terms operate on pixels of an :class:`EmbeddingMap` whose labels
come from :func:`downsample_labels`; IGNORE pixels are dropped from every sum.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

IGNORE = -1
PROB_EPS = 1e-7


class EmptyForeground(Exception):
    """No foreground pixel available to build prototypes from."""


class NoPositivePairs(Exception):
    """No anchor has a same-label partner, so the contrastive term is undefined."""


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{k}: loss weight must be finite and >= 0, got {v}")


@dataclass
class ContrastiveConfig:
    tau: float = 1.0
    n_p: int = 2
    margin: float = 0.5
    w1: float = 1.0
    w0: float = 1.0
    max_pixels: int = 1024
    kmeans_iters: int = 10
    learnable_prototypes: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau: must be > 0")
        if self.n_p < 1:
            raise ValueError("n_p: must be >= 1")
        if not 0 < self.margin <= 2:
            raise ValueError("margin: must lie in (0, 2]")
        if self.w1 < 0 or self.w0 < 0:
            raise ValueError("w1/w0: must be >= 0")
        if self.max_pixels < 2:
            raise ValueError("max_pixels: must be >= 2")


@dataclass
class EmbeddingMap:
    vectors: torch.Tensor  # (B, D, h, w)
    labels: torch.Tensor   # (B, h, w) in {0, 1, IGNORE}

    def __post_init__(self):
        if self.vectors.dim() != 4 or self.labels.dim() != 3:
            raise ValueError("EmbeddingMap expects vectors (B,D,h,w) and labels (B,h,w)")
        b, _, h, w = self.vectors.shape
        if tuple(self.labels.shape) != (b, h, w):
            raise ValueError(
                f"label shape {tuple(self.labels.shape)} does not match embeddings {(b, h, w)}")

    def valid(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Flattened (N, D) vectors and (N,) labels of non-IGNORE pixels."""
        d = self.vectors.shape[1]
        z = self.vectors.permute(0, 2, 3, 1).reshape(-1, d)
        y = self.labels.reshape(-1)
        keep = y != IGNORE
        return z[keep], y[keep]


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_loss(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    _check_shapes(pred_probs, target)
    p = pred_probs.clamp(eps, 1 - eps)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    _check_shapes(pred_probs, target)
    y = target.to(pred_probs.dtype)
    inter = (y * pred_probs).sum()
    return 1 - (2 * inter + smooth) / (y.sum() + pred_probs.sum() + smooth)


def downsample_labels(mask, factor: int, hi: float = 0.6, lo: float = 0.4) -> torch.Tensor:
    """Average-pool a binary mask by ``factor``; confident cells become 0/1, the rest IGNORE.

    Accepts (H, W) or (B, H, W); returns int64 labels of matching rank.
    """
    m = torch.as_tensor(mask).to(torch.float64)
    squeeze = m.dim() == 2
    if squeeze:
        m = m[None]
    if m.dim() != 3:
        raise ValueError("mask must be (H, W) or (B, H, W)")
    h, w = m.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide mask size {h}x{w}")
    frac = F.avg_pool2d(m[:, None], factor)[:, 0]
    out = torch.full(frac.shape, IGNORE, dtype=torch.int64)
    out[frac > hi] = 1
    out[frac < lo] = 0
    return out[0] if squeeze else out


def _normalize_rows(z: torch.Tensor) -> torch.Tensor:
    return z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)


def _farthest_point_init(x: torch.Tensor, k: int, rng: np.random.Generator) -> torch.Tensor:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    best = 1 - x @ x[idx[0]]
    for _ in range(1, k):
        j = int(torch.argmax(best))
        idx.append(j)
        best = torch.minimum(best, 1 - x @ x[j])
    return x[idx].clone()


def cosine_kmeans(x: torch.Tensor, k: int, iters: int, rng: np.random.Generator):
    """Spherical k-means on unit rows of ``x``. Returns (centres, assignment)."""
    centres = _farthest_point_init(x, k, rng)
    assign = None
    for _ in range(iters):
        new = torch.argmax(x @ centres.T, dim=1)
        if assign is not None and torch.equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = x[assign == c]
            if len(members) == 0:
                continue
            mean = members.mean(dim=0)
            if mean.norm() > 1e-12:
                centres[c] = mean / mean.norm()
    return centres, assign


def build_prototypes(emb: EmbeddingMap, cfg: ContrastiveConfig,
                     rng: np.random.Generator | None = None) -> torch.Tensor:
    """Foreground prototypes for one batch, shape (n_p, D), unit norm, detached."""
    rng = rng if rng is not None else np.random.default_rng(0)
    z, y = emb.valid()
    fg = _normalize_rows(z[y == 1].detach())
    if fg.shape[0] == 0:
        raise EmptyForeground("no foreground embeddings in batch")
    if fg.shape[0] < cfg.n_p:
        mean = fg.mean(dim=0)
        if mean.norm() <= 1e-12:
            mean = fg[0]
        return (mean / mean.norm()).expand(cfg.n_p, -1).clone()
    centres, _ = cosine_kmeans(fg, cfg.n_p, cfg.kmeans_iters, rng)
    return centres


class LearnablePrototypes(nn.Module):
    """Optional alternative to per-batch k-means: prototypes as free parameters."""

    def __init__(self, n_p: int, dim: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(n_p, dim, generator=g))

    def forward(self) -> torch.Tensor:
        return _normalize_rows(self.weight)


def stratified_subsample(y: torch.Tensor, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Class-balanced index sample of size ``cap`` (sorted)."""
    y_np = y.cpu().numpy()
    pools = [np.flatnonzero(y_np == c) for c in (0, 1)]
    quota = [min(len(p), cap // 2) for p in pools]
    spare = cap - sum(quota)
    for c in (0, 1):
        extra = min(spare, len(pools[c]) - quota[c])
        quota[c] += extra
        spare -= extra
    picked = [rng.choice(p, size=q, replace=False) for p, q in zip(pools, quota)]
    return np.sort(np.concatenate(picked))


def sce_loss(emb: EmbeddingMap, cfg: ContrastiveConfig,
             rng: np.random.Generator | None = None) -> torch.Tensor:
    rng = rng if rng is not None else np.random.default_rng(0)
    z, y = emb.valid()
    if z.shape[0] > cfg.max_pixels:
        idx = torch.as_tensor(stratified_subsample(y, cfg.max_pixels, rng))
        z, y = z[idx], y[idx]
    n = z.shape[0]
    if n < 2:
        raise NoPositivePairs(f"{n} valid pixel(s)")
    f = _normalize_rows(z)
    sim = f @ f.T / cfg.tau
    eye = torch.eye(n, dtype=torch.bool)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum()
    if n_pos == 0:
        raise NoPositivePairs("no same-label pair among valid pixels")
    denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = sim - denom
    return -(log_prob * pos).sum() / n_pos


def cosine_distance(z: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    return 1 - _normalize_rows(z) @ _normalize_rows(protos).T


def pcl_loss(emb: EmbeddingMap, protos: torch.Tensor, cfg: ContrastiveConfig) -> torch.Tensor:
    if protos is None or protos.dim() != 2 or protos.shape[0] == 0:
        raise ValueError("empty prototype set")
    z, y = emb.valid()
    if z.shape[0] == 0:
        return z.sum() * 0
    d = cosine_distance(z, protos)
    yf = y.to(d.dtype)[:, None]
    pull = cfg.w1 * yf * d**2
    push = cfg.w0 * (1 - yf) * torch.clamp(cfg.margin - d, min=0) ** 2
    return (pull + push).sum() / (z.shape[0] * protos.shape[0])


@dataclass
class LossBreakdown:
    bce: float = 0.0
    dice: float = 0.0
    sce: float = 0.0
    pcl: float = 0.0
    total: float = 0.0
    sce_skipped: bool = False
    pcl_skipped: bool = False
    notes: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        """Flat record for the training log, floats at 6 fractional digits."""
        rec = {k: f"{getattr(self, k):.6f}" for k in ("bce", "dice", "sce", "pcl", "total")}
        rec["sce_skipped"] = int(self.sce_skipped)
        rec["pcl_skipped"] = int(self.pcl_skipped)
        return rec


RECORD_FIELDS = ["bce", "dice", "sce", "pcl", "total", "sce_skipped", "pcl_skipped"]


def total_loss(logits: torch.Tensor, target_mask: torch.Tensor, emb: torch.Tensor,
               weights: LossWeights | None = None, cfg: ContrastiveConfig | None = None,
               rng: np.random.Generator | None = None,
               prototypes: torch.Tensor | None = None):
    """Weighted BCE + Dice + SPCL.

    ``logits`` and ``target_mask`` are (B, 1, H, W); ``emb`` is the unit-norm
    embedding map (B, D, h, w). ``prototypes`` overrides per-batch k-means
    (learnable-prototype mode). Returns ``(loss_tensor, LossBreakdown)``.
    """
    weights = weights or LossWeights()
    cfg = cfg or ContrastiveConfig()
    target = target_mask.to(logits.dtype)
    if target.dim() == 3:
        target = target[:, None]
    probs = torch.sigmoid(logits)
    l_bce = bce_loss(probs, target)
    l_dice = dice_loss(probs, target)
    total = weights.alpha * l_bce + weights.beta * l_dice
    br = LossBreakdown(bce=l_bce.item(), dice=l_dice.item())

    if weights.gamma == 0:
        br.sce_skipped = br.pcl_skipped = True
        br.total = total.item()
        return total, br

    factor = target.shape[-1] // emb.shape[-1]
    labels = downsample_labels(target[:, 0].detach().cpu(), factor).to(emb.device)
    em = EmbeddingMap(emb, labels)
    spcl = logits.new_zeros(())
    try:
        # a batch without foreground has nothing to contrast against
        if not (labels == 1).any():
            raise NoPositivePairs("no foreground embeddings in batch")
        l_sce = sce_loss(em, cfg, rng)
        spcl = spcl + l_sce
        br.sce = l_sce.item()
    except NoPositivePairs as e:
        br.sce_skipped = True
        br.notes.append(f"sce: {e}")
    try:
        protos = prototypes if prototypes is not None else build_prototypes(em, cfg, rng)
        l_pcl = pcl_loss(em, protos, cfg)
        spcl = spcl + l_pcl
        br.pcl = l_pcl.item()
    except EmptyForeground as e:
        br.pcl_skipped = True
        br.notes.append(f"pcl: {e}")
    total = total + weights.gamma * spcl
    br.total = total.item()
    return total, br
