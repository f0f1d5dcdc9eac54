"""Pixel-level ROC/AUC and precision-recall/APS, and calcification-level FROC."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatchError, UndefinedMetricError
from .morphology import ComponentSet, binarize, connected_components

#: Inputs with at most this many pixels get a curve point at every distinct score.
EXACT_SWEEP_LIMIT = 10_000
QUANTILE_GRID_SIZE = 1024
_trapezoid = getattr(np, "trapezoid", None) or np.trapz

DEFAULT_FROC_THRESHOLDS = tuple(np.round(np.linspace(0.95, 0.05, 19), 2))


@dataclass
class EvalCurve:
    kind: str  # "roc", "pr" or "froc"
    points: np.ndarray  # (n, 2) x, y
    thresholds: np.ndarray
    summary: float | None = None

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]

    def to_tsv(self) -> str:
        names = {"roc": ("fpr", "tpr", "AUC"), "pr": ("recall", "precision", "APS"),
                 "froc": ("fp_per_image", "sensitivity", None)}
        xn, yn, sn = names[self.kind]
        lines = [f"# calcseg {self.kind} curve v1", f"{xn}\t{yn}\tthreshold"]
        lines += [f"{x!r}\t{y!r}\t{t!r}" for (x, y), t in
                  zip(self.points.tolist(), np.asarray(self.thresholds, float).tolist())]
        if sn is not None:
            lines.append(f"# summary\t{sn}\t{self.summary!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        return path


def _as_grid(m):
    return np.asarray(getattr(m, "probs", m))


def pool_pixels(maps, masks):
    """Flatten and concatenate (scores, labels) over every image pair."""
    maps, masks = list(maps), list(masks)
    if len(maps) != len(masks):
        raise DimensionMismatchError("need one mask per map", len(maps), len(masks))
    scores, labels = [], []
    for p, m in zip(maps, masks):
        p, m = _as_grid(p), np.asarray(m)
        if p.shape != m.shape:
            raise DimensionMismatchError("map and mask sizes differ", p.shape, m.shape)
        scores.append(p.astype(np.float64).ravel())
        labels.append(m.astype(bool).ravel())
    if not scores:
        return np.zeros(0), np.zeros(0, bool)
    return np.concatenate(scores), np.concatenate(labels)


def _sweep(scores, labels):
    """Cumulative (tp, fp) at every distinct score, thresholds descending;
    a pixel is predicted positive when its score >= threshold."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y, dtype=np.int64)
    fp = np.cumsum(~y, dtype=np.int64)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    return s[last], tp[last], fp[last]


def _grid(scores, thresholds, tp, fp, exact_limit, grid_size):
    """Curve thresholds for export: every distinct score for small inputs,
    otherwise ``grid_size`` score quantiles."""
    if scores.size <= exact_limit:
        return thresholds, tp, fp
    grid = np.unique(np.quantile(scores, np.linspace(0, 1, grid_size)))[::-1]
    # index of the last distinct threshold >= each grid value
    idx = np.searchsorted(-thresholds, -grid, side="right") - 1
    return grid, tp[idx], fp[idx]


def roc_auc(maps, masks, exact_limit: int = EXACT_SWEEP_LIMIT,
            grid_size: int = QUANTILE_GRID_SIZE) -> EvalCurve:
    """Pixel-level ROC curve; the AUC is the trapezoidal area over the exact
    sweep of all distinct scores."""
    scores, labels = pool_pixels(maps, masks)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs at least one positive and one negative pixel")
    thr, tp, fp = _sweep(scores, labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(_trapezoid(tpr, fpr))
    g, gtp, gfp = _grid(scores, thr, tp, fp, exact_limit, grid_size)
    points = np.column_stack([np.r_[0.0, gfp / n_neg], np.r_[0.0, gtp / n_pos]])
    return EvalCurve("roc", points, np.r_[np.inf, g], auc)


def precision_recall_aps(maps, masks, exact_limit: int = EXACT_SWEEP_LIMIT,
                         grid_size: int = QUANTILE_GRID_SIZE) -> EvalCurve:
    """Pixel-level precision-recall; APS = sum_n (R_n - R_{n-1}) P_n over the
    descending sweep of all distinct scores."""
    scores, labels = pool_pixels(maps, masks)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision-recall needs at least one positive pixel")
    thr, tp, fp = _sweep(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    # left-to-right running sum, term for term the textbook definition
    aps = float(np.cumsum(np.diff(np.r_[0.0, recall]) * precision)[-1])
    g, gtp, gfp = _grid(scores, thr, tp, fp, exact_limit, grid_size)
    points = np.column_stack([gtp / n_pos, gtp / (gtp + gfp)])
    return EvalCurve("pr", points, g, aps)


@dataclass
class MatchResult:
    true_positives: int
    false_positives: int
    false_negatives: int
    matched_pairs: list[tuple[int, int]] = field(default_factory=list)


def match_components(predicted: ComponentSet, truth: ComponentSet, rule: str = "overlap",
                     iou_threshold: float = 0.5) -> MatchResult:
    """Calcification-level matching.

    ``overlap``: a predicted component detects every ground-truth component it
    shares at least one pixel with. ``iou``: a pair only matches when its
    intersection-over-union reaches ``iou_threshold``. Predicted components
    matching nothing are false positives.
    """
    if predicted.shape != truth.shape:
        raise DimensionMismatchError("component grids differ in size", truth.shape,
                                     predicted.shape)
    p, t = predicted.label_grid.ravel(), truth.label_grid.ravel()
    both = (p > 0) & (t > 0)
    n_t = len(truth) + 1
    codes, inter = np.unique(p[both].astype(np.int64) * n_t + t[both], return_counts=True)
    pairs = np.column_stack([codes // n_t, codes % n_t])
    if rule == "iou":
        area_p = np.bincount(p, minlength=len(predicted) + 1)
        area_t = np.bincount(t, minlength=n_t)
        union = area_p[pairs[:, 0]] + area_t[pairs[:, 1]] - inter
        pairs = pairs[inter / union >= iou_threshold]
    elif rule != "overlap":
        raise ConfigError(f"unknown matching rule {rule!r}")
    detected = np.unique(pairs[:, 1])
    used = np.unique(pairs[:, 0])
    tp = int(detected.size)
    return MatchResult(tp, len(predicted) - int(used.size), len(truth) - tp,
                       [(int(a), int(b)) for a, b in pairs])


def froc(maps, masks, threshold_grid=DEFAULT_FROC_THRESHOLDS, connectivity: int = 8,
         rule: str = "overlap", iou_threshold: float = 0.5) -> EvalCurve:
    """Sensitivity (detected / all ground-truth components) against mean false
    positive components per image, one point per threshold, thresholds descending."""
    thresholds = np.sort(np.asarray(threshold_grid, dtype=np.float64))[::-1]
    if thresholds.size == 0:
        raise ConfigError("FROC needs a non-empty threshold grid")
    maps, masks = [_as_grid(m) for m in maps], list(masks)
    if not maps or len(maps) != len(masks):
        raise DimensionMismatchError("need >= 1 image and one mask per map", len(maps), len(masks))
    truths = [connected_components(m, connectivity) for m in masks]
    total_truth = sum(len(t) for t in truths)
    tp = np.zeros(thresholds.size, np.int64)
    fp = np.zeros(thresholds.size, np.int64)
    for probs, truth in zip(maps, truths):
        for i, thr in enumerate(thresholds):
            pred = connected_components(binarize(probs, thr), connectivity)
            r = match_components(pred, truth, rule, iou_threshold)
            tp[i] += r.true_positives
            fp[i] += r.false_positives
    sens = tp / total_truth if total_truth else np.zeros(thresholds.size)
    points = np.column_stack([fp / len(maps), sens])
    return EvalCurve("froc", points, thresholds, None)


def summary_table(results: dict[str, tuple[float, float]]) -> str:
    """Aligned AUC / APS table, one row per split."""
    name_w = max([5] + [len(k) for k in results])
    lines = [f"{'split':<{name_w}}  {'AUC':>7}  {'APS':>7}"]
    lines += [f"{k:<{name_w}}  {auc:7.4f}  {aps:7.4f}" for k, (auc, aps) in results.items()]
    return "\n".join(lines) + "\n"


def write_run_report(path, results: dict[str, dict]) -> Path:
    """Tab-separated report: header ``split auc aps n_images``, one row per split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# calcseg eval report v1", "split\tauc\taps\tn_images"]
    lines += [f"{k}\t{v['auc']!r}\t{v['aps']!r}\t{v['n_images']}" for k, v in results.items()]
    path.write_text("\n".join(lines) + "\n")
    return path
