"""Change vector analysis baseline and binary change-map accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN, Raster


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with change as the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def _values(r):
    return r.values if isinstance(r, Raster) else np.asarray(r, dtype=np.float64)


def cva_magnitude(t1, t2):
    """Euclidean norm of the per-pixel spectral change vector."""
    a, b = _values(t1), _values(t2)
    if a.shape != b.shape:
        raise ValueError(f"dates differ in extent or bands: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return np.abs(b - a)
    return np.sqrt(np.sum((b - a) ** 2, axis=-1))


def otsu_threshold(values, bins=256):
    """Threshold maximising between-class variance of a ``bins``-bin histogram.

    Candidate thresholds are the interior bin edges over ``[min, max]``; the
    lowest maximiser wins. A constant input returns that constant.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = v.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    mu1 = np.divide(s0[-1] + hist[-1] * centers[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # plateaus are flat only up to rounding; take the first value within it
    best = np.flatnonzero(between >= between.max() * (1 - 1e-12))[0]
    return float(edges[1 + best])


def cva_change_map(t1, t2):
    mag = cva_magnitude(t1, t2)
    return (mag > otsu_threshold(mag)).astype(np.uint8)


def confusion(predicted, truth):
    """Confusion counts, skipping pixels labeled unknown (255) in ``truth``."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"map extents differ: {p.shape} vs {t.shape}")
    known = t != UNKNOWN
    p = p[known] > 0
    t = t[known] == 1
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionMatrix(tp, tn, fp, fn)


def overall_accuracy(cm):
    n = cm.total
    if n == 0:
        raise ValueError("empty confusion matrix")
    return (cm.tp + cm.tn) / n


def kappa(cm):
    """Cohen's kappa; defined as 0 when chance agreement is 1.

    With ``po = agree / n`` and ``pe = chance / n^2`` the ratio is
    ``(n agree - chance) / (n^2 - chance)``, evaluated in integers so the
    single final division is correctly rounded.
    """
    n = int(cm.total)
    if n == 0:
        raise ValueError("empty confusion matrix")
    tp, tn, fp, fn = int(cm.tp), int(cm.tn), int(cm.fp), int(cm.fn)
    agree = tp + tn
    chance = (tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)
    if chance == n * n:
        return 0.0
    return (n * agree - chance) / (n * n - chance)


def metrics_report(method, predicted, truth):
    """Metrics document ``{method, oa, kappa, tp, tn, fp, fn}``."""
    cm = confusion(predicted, truth)
    return {
        "method": method,
        "oa": overall_accuracy(cm),
        "kappa": kappa(cm),
        "tp": cm.tp,
        "tn": cm.tn,
        "fp": cm.fp,
        "fn": cm.fn,
    }
