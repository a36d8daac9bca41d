"""Multi-variant, multi-seed ablation runs and their comparison table / plots."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .config import ConfigError, RunConfig, parse_variant
from .synthdata import CountingData
from .training import build_model, build_vocab, evaluate, similarity_trace, train

log = logging.getLogger(__name__)

TABLE_METRICS = ("mae", "rmse", "game1", "game2", "game3", "rank_map", "similarity")


@dataclass
class RunOutcome:
    variant: str
    seed: int
    metrics: dict  # validation metrics of the selected checkpoint
    similarity_init: float
    similarity_trained: float
    seconds: float
    history: list

    def row(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, **self.metrics,
                "similarity_init": self.similarity_init, "similarity_trained": self.similarity_trained,
                "seconds": self.seconds}


def run_one(cfg: RunConfig, variant: str, seed: int, train_data: CountingData, val_data: CountingData,
            out_dir=None) -> RunOutcome:
    cfg = replace(cfg, variant=variant, seeds=(seed,))
    vocab = build_vocab(cfg, train_data)
    _, sim_init = similarity_trace(build_model(cfg, vocab, seed), vocab, val_data)
    t0 = time.time()
    result = train(cfg, train_data, val_data, out_dir=out_dir, seed=seed)
    seconds = time.time() - t0
    _, summary = evaluate(result.best_model(), result.vocab, val_data, cfg.eval_levels, cfg.batch_size)
    return RunOutcome(variant, seed, summary, sim_init, summary["similarity"], seconds, result.history)


def run_ablation(
    cfg: RunConfig,
    variants: Sequence[str],
    seeds: Sequence[int],
    train_data: CountingData,
    val_data: CountingData,
    out_dir=None,
    on_run: Optional[Callable[[RunOutcome], None]] = None,
) -> list:
    if len(variants) < 2:
        raise ConfigError("an ablation needs at least two variants")
    for v in variants:
        parse_variant(v)
    out_dir = Path(out_dir) if out_dir else None
    outcomes = []
    for variant in variants:
        for seed in seeds:
            run_dir = out_dir / "runs" / variant.replace(":", "_") / f"seed{seed}" if out_dir else None
            outcome = run_one(cfg, variant, seed, train_data, val_data, run_dir)
            log.info("%s seed %d: mae %.3f (%.0fs)", variant, seed, outcome.metrics["mae"], outcome.seconds)
            outcomes.append(outcome)
            if on_run:
                on_run(outcome)
    if out_dir:
        write_report(outcomes, out_dir)
    return outcomes


def aggregate(outcomes: Sequence[RunOutcome]) -> dict:
    """variant -> metric -> (mean, sample std); variants keep first-seen order."""
    grouped = {}
    for o in outcomes:
        grouped.setdefault(o.variant, []).append(o.row())
    agg = {}
    for variant, rows in grouped.items():
        keys = [k for k in rows[0] if k not in ("variant", "seed")]
        agg[variant] = {}
        for k in keys:
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            agg[variant][k] = (float(vals.mean()), std)
    return agg


def metric_rows(agg: dict, split="val") -> list:
    rows = []
    for variant, ms in agg.items():
        for k, (mean, std) in ms.items():
            rows.append((variant, split, f"{k}_mean", mean))
            rows.append((variant, split, f"{k}_std", std))
    return rows


def rows_to_agg(rows) -> dict:
    agg = {}
    for variant, _, metric, value in rows:
        name, stat = metric.rsplit("_", 1)
        slot = agg.setdefault(variant, {}).setdefault(name, [0.0, 0.0])
        slot[0 if stat == "mean" else 1] = value
    return {v: {k: tuple(x) for k, x in ms.items()} for v, ms in agg.items()}


def render_table(agg: dict, columns=TABLE_METRICS) -> str:
    labels = {v: parse_variant(v).label for v in agg}
    columns = [c for c in columns if any(c in ms for ms in agg.values())]
    header = ["variant"] + [c.upper() if c in ("mae", "rmse") else c for c in columns]
    body = [
        [labels[v]] + [f"{ms[c][0]:.3f} ± {ms[c][1]:.3f}" if c in ms else "-" for c in columns]
        for v, ms in agg.items()
    ]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def plot_bars(agg: dict, out_dir, columns=("mae", "rmse", "rank_map", "similarity")) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = list(agg)
    paths = []
    for col in columns:
        if not all(col in agg[v] for v in variants):
            continue
        means = [agg[v][col][0] for v in variants]
        stds = [agg[v][col][1] for v in variants]
        fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(variants)), 3.2))
        ax.bar(range(len(variants)), means, yerr=stds, capsize=3, color="#4c72b0")
        ax.set_xticks(range(len(variants)), variants, rotation=30, ha="right")
        ax.set_ylabel(col)
        fig.tight_layout()
        path = out_dir / f"{col}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_report(outcomes: Sequence[RunOutcome], out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [o.row() for o in outcomes]
    with open(out_dir / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    agg = aggregate(outcomes)
    metrics.write_metrics_csv(out_dir / "metrics.csv", metric_rows(agg))
    metrics.write_summary_json(out_dir / "summary.json", {
        "variants": {v: {k: {"mean": m, "std": s} for k, (m, s) in ms.items()} for v, ms in agg.items()},
        "runs": rows,
    })
    (out_dir / "table.txt").write_text(render_table(agg))
    plot_bars(agg, out_dir / "plots")
    return agg


def load_agg(path) -> dict:
    """Aggregates from a metrics CSV or a summary JSON written by :func:`write_report`."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        if "variants" in doc:
            return {v: {k: (d["mean"], d["std"]) for k, d in ms.items()} for v, ms in doc["variants"].items()}
        # single-run summary from `eval`: variant -> metric -> value
        return {v: {k: (float(x), 0.0) for k, x in ms.items()} for v, ms in doc.items()}
    return rows_to_agg(metrics.read_metrics_csv(path))
