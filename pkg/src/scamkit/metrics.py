"""The five saliency agreement measures: AUC-J, s-AUC, NSS, CC, SIM.

Conventions: NSS standardizes with the population std; SIM operates on
sum-normalized maps; AUC-Judd sweeps a threshold at each fixated pixel's
saliency value with all non-fixated pixels as negatives and trapezoidal
area between (0,0) and (1,1); shuffled AUC draws negatives from the union
of 10 rng-chosen other frames' fixations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """Raised on degenerate metric input (constant/zero/empty maps)."""


def cc(ps: np.ndarray, cf: np.ndarray) -> float:
    """Pearson correlation of the two maps as flat vectors."""
    if ps.shape != cf.shape:
        raise MetricError(f"shape mismatch: {ps.shape} vs {cf.shape}")
    a = ps.reshape(-1).astype(np.float64)
    b = cf.reshape(-1).astype(np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    if denom == 0.0:
        raise MetricError("cc undefined for constant map")
    return float(np.sum(a * b) / denom)


def sim(ps: np.ndarray, cf: np.ndarray) -> float:
    """Histogram intersection of the sum-normalized maps."""
    if ps.shape != cf.shape:
        raise MetricError(f"shape mismatch: {ps.shape} vs {cf.shape}")
    sa, sb = float(ps.sum()), float(cf.sum())
    if sa <= 0.0 or sb <= 0.0:
        raise MetricError("sim undefined for zero-sum map")
    return float(np.minimum(ps / sa, cf / sb).sum())


def nss(ps: np.ndarray, fl) -> float:
    """Mean standardized saliency at the fixation locations."""
    pts = list(fl)
    if not pts:
        raise MetricError("nss needs at least one fixation")
    std = float(ps.std())
    if std == 0.0:
        raise MetricError("nss undefined for constant map")
    z = (ps - ps.mean()) / std
    vals = [z[r, c] for r, c in pts]
    return float(np.mean(vals))


def _fixation_mask(shape, fl) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for r, c in fl:
        mask[r, c] = True
    return mask


def _roc_area(pos_vals: np.ndarray, neg_vals: np.ndarray) -> float:
    """Trapezoid area with (0,0),(1,1) endpoints, thresholds at positive values."""
    thresholds = np.unique(pos_vals)[::-1]
    tps = [0.0]
    fps = [0.0]
    for t in thresholds:
        tps.append(float(np.mean(pos_vals >= t)))
        fps.append(float(np.mean(neg_vals >= t)))
    tps.append(1.0)
    fps.append(1.0)
    return float(np.trapezoid(tps, fps))


def auc_judd(ps: np.ndarray, fl) -> float:
    """ROC area: positives = fixated pixels, negatives = all others."""
    pts = list(fl)
    if not pts:
        raise MetricError("auc_judd needs at least one fixation")
    mask = _fixation_mask(ps.shape, pts)
    if mask.all():
        raise MetricError("auc_judd undefined when every pixel is fixated")
    return _roc_area(ps[mask], ps[~mask])


def shuffled_auc(ps: np.ndarray, fl, other_fls, rng: np.random.Generator) -> float:
    """Like auc_judd, negatives drawn from 10 rng-chosen other frames' fixations."""
    pts = list(fl)
    if not pts:
        raise MetricError("shuffled_auc needs at least one fixation")
    pool = [list(f) for f in other_fls if f]
    if not pool:
        raise MetricError("shuffled_auc needs a non-empty negative pool")
    n_pick = min(10, len(pool))
    chosen = rng.choice(len(pool), size=n_pick, replace=False)
    positives = set(pts)
    negatives = sorted({p for i in chosen for p in pool[int(i)]} - positives)
    if not negatives:
        raise MetricError("shuffled_auc negative pool collapsed onto the positives")
    pos_vals = np.array([ps[r, c] for r, c in pts])
    neg_vals = np.array([ps[r, c] for r, c in negatives])
    return _roc_area(pos_vals, neg_vals)


@dataclass
class FrameMetrics:
    seq_id: str
    frame: int
    auc_j: float
    s_auc: float
    nss: float
    cc: float
    sim: float


@dataclass
class MetricsReport:
    frames: list = field(default_factory=list)

    def add(self, fm: FrameMetrics) -> None:
        self.frames.append(fm)

    def means(self) -> dict:
        if not self.frames:
            raise MetricError("empty report")
        return {
            "auc_j": float(np.mean([f.auc_j for f in self.frames])),
            "s_auc": float(np.mean([f.s_auc for f in self.frames])),
            "nss": float(np.mean([f.nss for f in self.frames])),
            "cc": float(np.mean([f.cc for f in self.frames])),
            "sim": float(np.mean([f.sim for f in self.frames])),
        }

    def to_csv(self) -> str:
        lines = ["seq,frame,auc_j,s_auc,nss,cc,sim"]
        for f in self.frames:
            lines.append(
                f"{f.seq_id},{f.frame},{f.auc_j:.9f},{f.s_auc:.9f},"
                f"{f.nss:.9f},{f.cc:.9f},{f.sim:.9f}"
            )
        m = self.means()
        lines.append(
            f"MEAN,,{m['auc_j']:.9f},{m['s_auc']:.9f},{m['nss']:.9f},"
            f"{m['cc']:.9f},{m['sim']:.9f}"
        )
        return "\n".join(lines) + "\n"
