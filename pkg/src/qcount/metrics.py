"""Count-error, localisation and rank-preservation metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class EvalRecord:
    image_id: int
    class_name: str
    gt_count: float
    pred_count: float
    # GAME level -> per-region (pred, gt) counts, row-major
    regions: dict = field(default_factory=dict)
    similarity: Optional[float] = None


def region_counts(density: np.ndarray, level: int) -> np.ndarray:
    """Sum a 2-D map over a 2^L x 2^L grid (row-major). Odd splits use floor/ceil edges."""
    cuts = 2 ** level
    h, w = density.shape
    if cuts > h or cuts > w:
        raise ValueError(f"{h}x{w} map cannot be split into {cuts}x{cuts} regions")
    ys = np.linspace(0, h, cuts + 1).round().astype(int)
    xs = np.linspace(0, w, cuts + 1).round().astype(int)
    return np.add.reduceat(np.add.reduceat(density, ys[:-1], axis=0), xs[:-1], axis=1).ravel()


def make_record(image_id, class_name, pred_density, gt_density, levels=(0, 1, 2, 3), gt_count=None, similarity=None):
    pred_density = np.asarray(pred_density, dtype=np.float64)
    gt_density = np.asarray(gt_density, dtype=np.float64)
    total = gt_density.sum()
    if gt_count is not None and total > 0:
        # regions must add up to the reported count or GAME(1) could undercut GAME(0)
        gt_density = gt_density * (gt_count / total)
    regions = {
        lvl: (region_counts(pred_density, lvl), region_counts(gt_density, lvl)) for lvl in levels
    }
    return EvalRecord(
        image_id=int(image_id),
        class_name=class_name,
        gt_count=float(gt_density.sum() if gt_count is None else gt_count),
        pred_count=float(pred_density.sum()),
        regions=regions,
        similarity=similarity,
    )


def mae_rmse(records: Sequence[EvalRecord]) -> tuple:
    if not records:
        raise ValueError("no records to evaluate")
    err = np.array([r.pred_count - r.gt_count for r in records])
    return float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean()))


def game(records: Sequence[EvalRecord], level: int) -> float:
    """Grid average mean absolute error at ``level``; level 0 is the count MAE."""
    if not records:
        raise ValueError("no records to evaluate")
    if level == 0:
        return mae_rmse(records)[0]
    total = 0.0
    for r in records:
        if level not in r.regions:
            raise ValueError(f"record {r.image_id} has no level-{level} regions")
        pred, gt = r.regions[level]
        total += float(np.abs(np.asarray(pred) - np.asarray(gt)).sum())
    return total / len(records)


def _ascending(ids, values):
    # ties broken by image id
    return [i for _, i in sorted(zip(values, ids))]


def prefix_overlap_ap(gt_order: Sequence, pred_order: Sequence) -> float:
    """Mean over k of |first k of pred_order & first k of gt_order| / k."""
    n = len(gt_order)
    seen_gt, seen_pred = set(), set()
    total = 0.0
    for k in range(n):
        seen_gt.add(gt_order[k])
        seen_pred.add(pred_order[k])
        total += len(seen_gt & seen_pred) / (k + 1)
    return total / n


def rank_map(records: Iterable[EvalRecord]) -> float:
    """Mean over classes of the prefix-overlap AP between GT- and prediction-sorted images."""
    by_class = defaultdict(list)
    for r in records:
        by_class[r.class_name].append(r)
    aps = []
    for name in sorted(by_class):
        group = by_class[name]
        if len(group) < 2:
            log.warning("class %r has fewer than 2 images; skipped in rank mAP", name)
            continue
        ids = [r.image_id for r in group]
        gt_order = _ascending(ids, [r.gt_count for r in group])
        pred_order = _ascending(ids, [r.pred_count for r in group])
        aps.append(prefix_overlap_ap(gt_order, pred_order))
    if not aps:
        raise ValueError("no class has at least 2 images")
    return float(np.mean(aps))


def similarity_summary(records: Sequence[EvalRecord]) -> tuple:
    """(per-image positive-pair similarities ordered by image id, their mean)."""
    rs = sorted((r for r in records if r.similarity is not None), key=lambda r: r.image_id)
    values = [r.similarity for r in rs]
    return values, (float(np.mean(values)) if values else math.nan)


def summarize(records: Sequence[EvalRecord], levels=(0, 1, 2, 3)) -> dict:
    mae, rmse = mae_rmse(records)
    out = {"mae": mae, "rmse": rmse}
    for lvl in levels:
        out[f"game{lvl}"] = game(records, lvl)
    try:
        out["rank_map"] = rank_map(records)
    except ValueError:
        out["rank_map"] = math.nan
    out["similarity"] = similarity_summary(records)[1]
    return out


def write_metrics_csv(path, rows: Iterable[tuple]):
    """Rows of (variant, split, metric, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "split", "metric", "value"])
        for row in rows:
            w.writerow(row)


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            (r["variant"], r["split"], r["metric"], float(r["value"]))
            for r in csv.DictReader(fh)
        ]


def write_summary_json(path, summary: dict):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
