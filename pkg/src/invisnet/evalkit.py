"""Metrics, reports and plots for the evaluation stage."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .backbone import Detection, box_iou

log = logging.getLogger(__name__)

ENRICHMENT_EPS = 1e-9


# distributions --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianFit:
    mean: float
    std: float
    n: int


def fit_gaussian(scores) -> GaussianFit:
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("fit_gaussian needs at least one value")
    # shifted by the first value so constant input gives exactly (c, 0)
    d = x - x[0]
    return GaussianFit(float(x[0] + d.mean()), float(d.std()), int(x.size))


def separability(a, b) -> float:
    """P(b > a) for independent draws, ties counted half (Mann-Whitney AUC)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("separability needs two nonempty samples")
    a_sorted = np.sort(a)
    below = np.searchsorted(a_sorted, b, side="left").astype(np.float64)
    ties = np.searchsorted(a_sorted, b, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (a.size * b.size))


# coverage -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class CoverageReport:
    threshold: float
    fn_coverage: float | None
    flagged_fraction: float
    enrichment: float | None
    fn_pixels: int
    total_pixels: int

    @property
    def has_fn(self) -> bool:
        return self.fn_coverage is not None


def coverage(score: np.ndarray, fn_mask: np.ndarray, threshold: float) -> CoverageReport:
    s = np.asarray(score, dtype=np.float64)
    m = np.asarray(fn_mask).astype(bool)
    if s.shape != m.shape:
        raise ValueError(f"score shape {s.shape} and mask shape {m.shape} differ")
    flagged = s >= threshold
    total = s.size
    frac = float(np.count_nonzero(flagged)) / total if total else 0.0
    n_fn = int(np.count_nonzero(m))
    if n_fn == 0:
        return CoverageReport(float(threshold), None, frac, None, 0, total)
    cov = float(np.count_nonzero(flagged & m)) / n_fn
    return CoverageReport(float(threshold), cov, frac, cov / max(frac, ENRICHMENT_EPS), n_fn, total)


def coverage_curve(score: np.ndarray, fn_mask: np.ndarray, thresholds: Sequence[float]) -> list[CoverageReport]:
    return [coverage(score, fn_mask, t) for t in thresholds]


def score_histogram(score: np.ndarray, fn_mask: np.ndarray, bins: int = 20) -> list[tuple[float, float, float]]:
    """(bin left edge, undetected-pixel mass, all-pixel mass) over [0, 1]."""
    s = np.asarray(score, dtype=np.float64).ravel()
    m = np.asarray(fn_mask).astype(bool).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    all_h, _ = np.histogram(np.clip(s, 0, 1), edges)
    fn_h, _ = np.histogram(np.clip(s[m], 0, 1), edges)
    all_m = all_h / max(all_h.sum(), 1)
    fn_m = fn_h / max(fn_h.sum(), 1)
    return [(float(e), float(f), float(a)) for e, f, a in zip(edges[:-1], fn_m, all_m)]


# detection -------------------------------------------------------------------------------


@dataclass
class ConditionStats:
    recall: float
    mean_iou: float
    matched: int
    truths: int
    predictions: int


@dataclass
class DetectionReport:
    per_condition: dict[str, ConditionStats] = field(default_factory=dict)

    @property
    def overall(self) -> ConditionStats:
        return _aggregate(list(self.per_condition.values()))


def _aggregate(stats: Sequence[ConditionStats]) -> ConditionStats:
    matched = sum(s.matched for s in stats)
    truths = sum(s.truths for s in stats)
    iou_sum = sum(s.mean_iou * s.matched for s in stats)
    return ConditionStats(
        matched / truths if truths else 0.0,
        iou_sum / matched if matched else 0.0,
        matched,
        truths,
        sum(s.predictions for s in stats),
    )


def match_detections(pred: Sequence[Detection], truth: Sequence[dict], iou_thresh: float = 0.5) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by descending score; returns (pred index, truth index, IoU)."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    order = sorted(range(len(pred)), key=lambda i: -pred[i].score)
    taken: set[int] = set()
    pairs = []
    for i in order:
        p = pred[i]
        best_j, best_iou = -1, iou_thresh
        for j, t in enumerate(truth):
            if j in taken:
                continue
            iou = box_iou((p.x, p.y, p.w, p.h), (t["x"], t["y"], t["w"], t["h"]))
            if iou >= best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken.add(best_j)
            pairs.append((i, best_j, best_iou))
    return pairs


def image_detection_stats(pred: Sequence[Detection], truth: Sequence[dict], iou_thresh: float = 0.5) -> ConditionStats:
    pairs = match_detections(pred, truth, iou_thresh)
    ious = [p[2] for p in pairs]
    return ConditionStats(
        len(pairs) / len(truth) if truth else 0.0,
        float(np.mean(ious)) if ious else 0.0,
        len(pairs),
        len(truth),
        len(pred),
    )


def detection_eval(preds: Sequence[Sequence[Detection]], truths: Sequence[Sequence[dict]],
                   conditions: Sequence[str], iou_thresh: float = 0.5) -> DetectionReport:
    if not (len(preds) == len(truths) == len(conditions)):
        raise ValueError("preds, truths and conditions must have equal length")
    grouped: dict[str, list[ConditionStats]] = {}
    for p, t, c in zip(preds, truths, conditions):
        grouped.setdefault(c, []).append(image_detection_stats(p, t, iou_thresh))
    return DetectionReport({c: _aggregate(v) for c, v in grouped.items()})


def undetected_mask(pred: Sequence[Detection], truth: Sequence[dict], object_masks: np.ndarray,
                    iou_thresh: float = 0.5) -> np.ndarray:
    """Union of pixel masks of ground-truth objects left unmatched by the detector."""
    matched = {j for _, j, _ in match_detections(pred, truth, iou_thresh)}
    out = np.zeros(object_masks.shape[1:], dtype=bool)
    for j in range(len(truth)):
        if j not in matched:
            out |= object_masks[j].astype(bool)
    return out


# offsets ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class OffsetStats:
    bins: np.ndarray  # integer displacement magnitudes 0..max
    hist_dx: np.ndarray
    hist_dy: np.ndarray
    frac_ge5: float
    mean_abs_dx: float
    mean_abs_dy: float
    n: int


def offset_stats(flows: Sequence, max_bin: int = 16, large: float = 5.0) -> OffsetStats:
    """Pooled displacement statistics; a pixel counts as large when max(|dx|, |dy|) >= ``large``."""
    if not flows:
        raise ValueError("offset_stats needs at least one flow field")
    fl = [np.asarray(getattr(f, "flow", f), dtype=np.float64) for f in flows]
    dx = np.abs(np.concatenate([f[0].ravel() for f in fl]))
    dy = np.abs(np.concatenate([f[1].ravel() for f in fl]))
    edges = np.arange(max_bin + 2) - 0.5
    hx, _ = np.histogram(np.minimum(np.round(dx), max_bin), edges)
    hy, _ = np.histogram(np.minimum(np.round(dy), max_bin), edges)
    return OffsetStats(
        np.arange(max_bin + 1),
        hx / dx.size,
        hy / dy.size,
        float(np.mean(np.maximum(dx, dy) >= large)),
        float(dx.mean()),
        float(dy.mean()),
        int(dx.size),
    )


# size sweep ---------------------------------------------------------------------------------


@dataclass
class SweepPoint:
    size: int
    metric: float
    seed: int


@dataclass
class SweepReport:
    points: list[SweepPoint]

    def __post_init__(self):
        sizes = [p.size for p in self.points]
        if any(b < a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"sweep sizes must be nondecreasing, got {sizes}")

    def metric_at(self, size: int) -> float:
        for p in self.points:
            if p.size == size:
                return p.metric
        raise KeyError(size)

    def relative_gap(self, a: int, b: int) -> float:
        mb = self.metric_at(b)
        return abs(self.metric_at(a) - mb) / abs(mb)


def size_sweep(train_fn: Callable[[int, int], float], sizes: Sequence[int], available: int | None = None,
               seed: int = 0) -> SweepReport:
    """``train_fn(size, seed)`` trains on the first ``size`` pairs and returns the held-out metric."""
    points = []
    for size in sizes:
        if size <= 0:
            raise ValueError(f"sweep size must be positive, got {size}")
        if available is not None and size > available:
            raise ValueError(f"sweep size {size} exceeds the {available} available pairs")
        metric = float(train_fn(size, seed))
        log.info("size_sweep size %d metric %.5f", size, metric)
        points.append(SweepPoint(int(size), metric, seed))
    return SweepReport(points)


# reports ---------------------------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (float, np.floating)):
        return "NA" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def text_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(header)] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def detection_rows(reports: Mapping[str, DetectionReport]) -> tuple[list[str], list[list]]:
    """One row per variant, one recall column per condition plus overall."""
    conds = sorted({c for r in reports.values() for c in r.per_condition})
    header = ["variant"] + [f"recall_{c}" for c in conds] + ["recall_overall", "mean_iou_overall"]
    rows = []
    for name, rep in reports.items():
        row = [name] + [rep.per_condition[c].recall if c in rep.per_condition else None for c in conds]
        ov = rep.overall
        rows.append(row + [ov.recall, ov.mean_iou])
    return header, rows


# plots ---------------------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "invisnet"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    import matplotlib.pyplot as plt

    plt.close(fig)


def plot_histogram(hist: Sequence[tuple[float, float, float]], threshold: float, path: str | Path) -> None:
    plt = _pyplot()
    left = np.array([h[0] for h in hist])
    width = left[1] - left[0] if len(left) > 1 else 1.0
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(left, [h[2] for h in hist], width=width, align="edge", alpha=0.5, label="all pixels")
    ax.bar(left, [h[1] for h in hist], width=width, align="edge", alpha=0.5, label="undetected-object pixels")
    ax.axvline(threshold, color="k", linestyle="--", label=f"threshold {threshold:g}")
    ax.set_xlabel("invisibility score")
    ax.set_ylabel("pixel mass")
    ax.legend()
    _save(fig, path)


def plot_distributions(samples: Mapping[str, np.ndarray], path: str | Path, xlabel: str = "invisibility score") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, vals in samples.items():
        vals = np.asarray(vals).ravel()
        if vals.size == 0:
            continue
        g = fit_gaussian(vals)
        ax.hist(vals, bins=40, density=True, alpha=0.35, label=f"{label} ({g.mean:.3f}, {g.std:.3f})")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend()
    _save(fig, path)


def plot_sweep(report: SweepReport, path: str | Path, ylabel: str = "held-out distance reduction") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p.size for p in report.points], [p.metric for p in report.points], "o-")
    ax.set_xscale("log")
    ax.set_xlabel("training pairs")
    ax.set_ylabel(ylabel)
    _save(fig, path)


def plot_offsets(stats: OffsetStats, path: str | Path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(stats.bins - 0.2, stats.hist_dx, width=0.4, label="|dx|")
    ax.bar(stats.bins + 0.2, stats.hist_dy, width=0.4, label="|dy|")
    ax.set_xlabel("displacement (px)")
    ax.set_ylabel("fraction of pixels")
    ax.legend()
    _save(fig, path)
