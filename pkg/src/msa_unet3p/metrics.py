"""Overlap metrics from confusion counts and boundary distance metrics (ASD, ACD).

ASD uses the unordered set of surface pixels (foreground with a background
8-neighbour, image border counting as background). ACD uses the points of a
Moore border trace of each connected component, deduplicated. Distances are
in pixels. The fast path samples an exact Euclidean distance transform; the
oracle path in :mod:`msa_unet3p.oracle` compares every point pair.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels

EIGHT = np.ones((3, 3), dtype=bool)
METRIC_NAMES = ("recall", "f1", "dice", "asd", "acd")


class UndefinedDistance(ValueError):
    """Boundary distance requested with an empty mask."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_bool(a) -> np.ndarray:
    return np.asarray(a).astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice_score(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def recall(c: ConfusionCounts) -> float:
    den = c.tp + c.fn
    if den == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / den


def precision(c: ConfusionCounts) -> float:
    den = c.tp + c.fp
    if den == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / den


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class BoundarySet:
    points: np.ndarray  # (n, 2) int rows/cols
    kind: str

    def __len__(self):
        return len(self.points)


def surface_points(mask) -> np.ndarray:
    return np.argwhere(kernels.surface_mask(_as_bool(mask)))


def contour_trace(mask) -> np.ndarray:
    """Ordered Moore trace points of each 8-connected component (may repeat)."""
    m = _as_bool(mask)
    labels, _ = ndimage.label(m, structure=EIGHT)
    return kernels.trace_contours(m, labels)


def extract_boundary(mask, kind: str = "surface") -> BoundarySet:
    if kind == "surface":
        return BoundarySet(surface_points(mask), kind)
    if kind == "contour":
        pts = contour_trace(mask)
        if len(pts):
            pts = np.unique(pts, axis=0)
        return BoundarySet(pts, kind)
    raise ValueError(f"unknown boundary kind {kind!r}")


def _point_mask(points: np.ndarray, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[points[:, 0], points[:, 1]] = True
    return m


def _directed_mean(src: np.ndarray, dst: np.ndarray, shape) -> float:
    dt = ndimage.distance_transform_edt(~_point_mask(dst, shape))
    return float(dt[src[:, 0], src[:, 1]].mean())


def symmetric_boundary_distance(a: BoundarySet, b: BoundarySet, shape) -> float:
    if len(a) == 0 or len(b) == 0:
        raise UndefinedDistance("boundary distance undefined for an empty mask")
    return 0.5 * (_directed_mean(a.points, b.points, shape)
                  + _directed_mean(b.points, a.points, shape))


def _boundary_metric(pred, truth, kind: str, backend: str) -> float:
    p, t = _as_bool(pred), _as_bool(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if not p.any() or not t.any():
        raise UndefinedDistance(f"{kind} distance undefined: empty mask")
    if backend == "oracle":
        from . import oracle
        return oracle.asd(p, t) if kind == "surface" else oracle.acd(p, t)
    if backend != "fast":
        raise ValueError(f"unknown backend {backend!r}")
    return symmetric_boundary_distance(extract_boundary(p, kind),
                                       extract_boundary(t, kind), p.shape)


def asd(pred, truth, backend: str = "fast") -> float:
    return _boundary_metric(pred, truth, "surface", backend)


def acd(pred, truth, backend: str = "fast") -> float:
    return _boundary_metric(pred, truth, "contour", backend)


@dataclass
class SampleMetrics:
    id: str
    recall: float
    f1: float
    dice: float
    asd: float = math.nan
    acd: float = math.nan
    excluded: bool = False  # boundary metrics undefined (empty mask)


def sample_metrics(pred, truth, sample_id: str = "", backend: str = "fast") -> SampleMetrics:
    c = confusion(pred, truth)
    sm = SampleMetrics(sample_id, recall(c), f1(c), dice_score(c))
    try:
        sm.asd = asd(pred, truth, backend)
        sm.acd = acd(pred, truth, backend)
    except UndefinedDistance:
        sm.excluded = True
    return sm


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


@dataclass
class MetricsReport:
    """Per-sample metrics plus mean/std aggregates (population std, excluded samples
    dropped from ASD/ACD)."""

    samples: list[SampleMetrics] = field(default_factory=list)

    def values(self, name: str) -> np.ndarray:
        v = np.array([getattr(s, name) for s in self.samples], dtype=float)
        return v[~np.isnan(v)]

    def mean(self, name: str) -> float:
        v = self.values(name)
        return float(v.mean()) if len(v) else math.nan

    def std(self, name: str) -> float:
        v = self.values(name)
        return float(v.std()) if len(v) else math.nan

    def aggregate(self) -> dict:
        return {m: {"mean": self.mean(m), "std": self.std(m)} for m in METRIC_NAMES}

    @property
    def n_excluded(self) -> int:
        return sum(s.excluded for s in self.samples)

    def to_csv(self, path) -> None:
        cols = ["id", *METRIC_NAMES, "excluded"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for s in self.samples:
                w.writerow([s.id, *(_fmt(getattr(s, m)) for m in METRIC_NAMES), int(s.excluded)])
            w.writerow(["aggregate", *(_fmt(self.mean(m)) for m in METRIC_NAMES), self.n_excluded])

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["id"] == "aggregate":
                    continue
                vals = {m: float(row[m]) if row[m] else math.nan for m in METRIC_NAMES}
                out.samples.append(SampleMetrics(row["id"], excluded=bool(int(row["excluded"])), **vals))
        return out

    def summary(self) -> dict:
        return {"n_samples": len(self.samples), "n_excluded": self.n_excluded,
                "metrics": self.aggregate()}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)

    def as_dicts(self) -> list[dict]:
        return [asdict(s) for s in self.samples]


def evaluate_masks(preds, truths, ids=None, backend: str = "fast") -> MetricsReport:
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    return MetricsReport([sample_metrics(p, t, i, backend) for p, t, i in zip(preds, truths, ids)])
