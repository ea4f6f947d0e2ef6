"""Detection and localization metrics: image/pixel AUROC, pixel AP and PRO."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # mid-ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve.

    Tied scores form a single threshold, so the value does not depend on the
    order of tied entries.
    """
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    sorted_scores, sorted_labels = scores[order], labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def _regions(masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel region weight ``1 / (R * |region|)`` and a flat negative-pixel flag."""
    labelled = []
    sizes = []
    for mask in masks:
        lab, count = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
        labelled.append((lab, count))
        sizes.extend(np.bincount(lab.ravel(), minlength=count + 1)[1:].tolist())
    n_regions = len(sizes)
    if n_regions == 0:
        raise ValueError("PRO needs at least one anomalous region")
    weights = []
    offset = 0
    for lab, count in labelled:
        table = np.zeros(count + 1)
        table[1:] = 1.0 / (n_regions * np.asarray(sizes[offset : offset + count], dtype=np.float64))
        weights.append(table[lab].ravel())
        offset += count
    negatives = np.concatenate([~np.asarray(m, dtype=bool).ravel() for m in masks])
    return np.concatenate(weights), negatives


def pro_curve(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """FPR and mean per-region recall at every distinct threshold, starting from ``(0, 0)``."""
    if len(score_maps) != len(gt_masks):
        raise ValueError("one ground-truth mask per score map is required")
    for s, m in zip(score_maps, gt_masks):
        if np.shape(s) != np.shape(m):
            raise ValueError(f"score map {np.shape(s)} and mask {np.shape(m)} differ in shape")
    weights, negatives = _regions(gt_masks)
    n_neg = int(negatives.sum())
    if n_neg == 0:
        raise ValueError("PRO needs at least one normal pixel to measure false positives")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_maps])
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    fpr = np.cumsum(negatives[order])[ends] / n_neg
    overlap = np.cumsum(weights[order])[ends]
    return np.r_[0.0, fpr], np.r_[0.0, overlap]


def pro(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Normalised area under the per-region-overlap curve for FPR in ``[0, fpr_limit]``."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, overlap = pro_curve(score_maps, gt_masks)
    inside = fpr <= fpr_limit
    xs, ys = fpr[inside], overlap[inside]
    if xs[-1] < fpr_limit:
        nxt = np.flatnonzero(~inside)[0]
        x0, x1, y0, y1 = fpr[nxt - 1], fpr[nxt], overlap[nxt - 1], overlap[nxt]
        xs = np.r_[xs, fpr_limit]
        ys = np.r_[ys, y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)]
    area = np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0)
    return float(area / fpr_limit)


@dataclass
class EvalReport:
    image_auroc: float
    pixel_auroc: float
    pro: float
    pixel_ap: float
    n_images: int
    n_pixels: int
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self) -> str:
        names = ("image_auroc", "pixel_auroc", "pro", "pixel_ap")
        rows = [("category",) + names]
        for cat in sorted(self.per_category):
            rows.append((cat,) + tuple(f"{self.per_category[cat][k]:.4f}" for k in names))
        rows.append(("mean",) + tuple(f"{getattr(self, k):.4f}" for k in names))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


def _category_metrics(scores, heatmaps, masks, labels, fpr_limit) -> dict[str, float]:
    pixel_scores = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    pixel_labels = np.concatenate([np.asarray(m, dtype=bool).ravel() for m in masks])
    return {
        "image_auroc": auroc(scores, labels),
        "pixel_auroc": auroc(pixel_scores, pixel_labels),
        "pro": pro(heatmaps, masks, fpr_limit),
        "pixel_ap": average_precision(pixel_scores, pixel_labels),
        "n_images": len(scores),
        "n_pixels": int(pixel_labels.size),
    }


def evaluate(
    results: Sequence,
    gt_masks: Sequence[np.ndarray],
    labels: Sequence[int],
    fpr_limit: float = 0.3,
    categories: Sequence[str] | None = None,
) -> EvalReport:
    """Score a set of inference results against ground truth.

    Metrics are computed per category with pixels pooled inside a category,
    then macro-averaged across categories.
    """
    if not (len(results) == len(gt_masks) == len(labels)):
        raise ValueError("results, masks and labels must have equal length")
    if not len(results):
        raise ValueError("nothing to evaluate")
    categories = list(categories) if categories is not None else ["all"] * len(results)
    per_category = {}
    for cat in sorted(set(categories)):
        idx = [i for i, c in enumerate(categories) if c == cat]
        per_category[cat] = _category_metrics(
            [results[i].image_score for i in idx],
            [results[i].heatmap for i in idx],
            [gt_masks[i] for i in idx],
            [labels[i] for i in idx],
            fpr_limit,
        )
    names = ("image_auroc", "pixel_auroc", "pro", "pixel_ap")
    means = {k: float(np.mean([m[k] for m in per_category.values()])) for k in names}
    return EvalReport(
        **means,
        n_images=len(results),
        n_pixels=sum(m["n_pixels"] for m in per_category.values()),
        per_category=per_category,
    )
