"""Segmentation and robustness metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

IGNORE_ID = 255


def resize_nearest(label_map: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize with the pixel-center convention."""
    h, w = label_map.shape[:2]
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be at least 1x1, got {target}")
    if (h, w) == (th, tw):
        return label_map.copy()
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(np.int64), w - 1)
    return label_map[rows[:, None], cols[None, :]]


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, class_count: int, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """``C x C`` counts, rows = ground truth, columns = prediction; ignore pixels dropped."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != ignore_id
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.max() >= class_count or p.max() >= class_count or p.min() < 0):
        raise ValueError(f"class id outside [0, {class_count})")
    return np.bincount(g * class_count + p, minlength=class_count * class_count).reshape(class_count, class_count)


def mean_iou(preds, gts, class_count: int, ignore_id: int = IGNORE_ID):
    """Dataset-level mIoU from accumulated confusion counts.

    Returns ``(miou, per_class)``; classes with an empty union are NaN in
    ``per_class`` and left out of the mean.
    """
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("need equally many predictions and ground truths, at least one")
    conf = np.zeros((class_count, class_count), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(np.asarray(p), np.asarray(g), class_count, ignore_id)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - tp
    per_class = np.full(class_count, np.nan)
    valid = union > 0
    per_class[valid] = tp[valid] / union[valid]
    miou = float(np.mean(per_class[valid])) if valid.any() else float("nan")
    return miou, per_class


def _iou_matrix(instances, cluster_map):
    ids = np.unique(cluster_map)
    out = np.zeros((len(instances), len(ids)))
    for j, c in enumerate(ids):
        cm = cluster_map == c
        for i, inst in enumerate(instances):
            inter = np.count_nonzero(inst & cm)
            union = np.count_nonzero(inst | cm)
            out[i, j] = inter / union if union else 0.0
    return out


def jaccard_similarity(cluster_maps, gt_instances, matching: str = "best", direction: str = "gt_to_cluster"):
    """Category-agnostic Jaccard Similarity.

    For every ground-truth instance take its best IoU over the predicted
    clusters of the same image (clusters may be reused across instances) and
    average over all instances in the set. Images without instances are
    skipped. ``matching="hungarian"`` enforces one-to-one matching instead;
    ``direction="cluster_to_gt"`` averages over clusters instead of instances.
    Cluster maps are nearest-upsampled to the instance resolution.
    """
    scores = []
    for cmap, instances in zip(cluster_maps, gt_instances):
        instances = [np.asarray(m, dtype=bool) for m in instances]
        if not instances:
            continue
        cmap = np.asarray(cmap)
        if cmap.shape != instances[0].shape:
            cmap = resize_nearest(cmap, instances[0].shape)
        ious = _iou_matrix(instances, cmap)
        if matching == "hungarian":
            rows, cols = linear_sum_assignment(-ious)
            matched = np.zeros(ious.shape[0] if direction == "gt_to_cluster" else ious.shape[1])
            for r, c in zip(rows, cols):
                matched[r if direction == "gt_to_cluster" else c] = ious[r, c]
            scores.extend(matched)
        elif matching == "best":
            scores.extend(ious.max(axis=1) if direction == "gt_to_cluster" else ious.max(axis=0))
        else:
            raise ValueError(f"unknown matching {matching!r}")
    if not scores:
        return float("nan")
    return float(np.mean(scores))


def top1_accuracy(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    return float(np.mean(predicted == truth))


@dataclass
class AccuracyTable:
    rows: list  # true categories
    cols: list  # background conditions
    cells: dict  # (row, col) -> accuracy % (absent cells are missing)
    match: dict  # row -> its correlated column
    counts: dict

    def delta(self, row) -> float | None:
        """Off-diagonal minus on-diagonal accuracy for ``row`` (two conditions)."""
        on = self.cells.get((row, self.match[row]))
        off = [self.cells.get((row, c)) for c in self.cols if c != self.match[row]]
        if on is None or not off or any(o is None for o in off):
            return None
        return float(np.mean(off)) - on

    def mean_abs_delta(self) -> float:
        ds = [self.delta(r) for r in self.rows]
        ds = [abs(d) for d in ds if d is not None]
        return float(np.mean(ds)) if ds else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", *self.cols, "delta"])
        for r in self.rows:
            vals = [self.cells.get((r, c)) for c in self.cols]
            d = self.delta(r)
            w.writerow([r, *("" if v is None else f"{v:.4f}" for v in vals), "" if d is None else f"{d:.4f}"])
        return buf.getvalue()


def accuracy_table(records, match: dict) -> AccuracyTable:
    """``records`` are ``(true_category, condition, predicted_category)`` triples.

    ``match`` maps each category to the condition it is correlated with in
    training. Cells with no samples are absent rather than zero.
    """
    rows = list(match)
    cols = []
    for _, c, _ in records:
        if c not in cols:
            cols.append(c)
    cols.sort(key=lambda c: [match[r] for r in rows].index(c) if c in match.values() else len(rows))
    hits, counts = {}, {}
    for truth, cond, pred in records:
        key = (truth, cond)
        counts[key] = counts.get(key, 0) + 1
        hits[key] = hits.get(key, 0) + int(pred == truth)
    cells = {k: 100.0 * hits[k] / counts[k] for k in counts}
    return AccuracyTable(rows, cols, cells, dict(match), counts)


def metrics_csv(rows, config_digest: str) -> str:
    """``metric,split,config_digest,value`` lines; ``rows`` is ``(metric, split, value)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "split", "config_digest", "value"])
    for metric, split, value in rows:
        w.writerow([metric, split, config_digest, "" if value is None or np.isnan(value) else repr(float(value))])
    return buf.getvalue()
