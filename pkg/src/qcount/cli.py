"""Command line entry point: ``qcount <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import ablation, metrics
from .config import ConfigError, RunConfig, load_config, parse_variant, save_config
from .io import CheckpointError
from .prompts import generate_prompt_set
from .synthdata import CountingData, DatasetSpec, generate, generate_split, load_split
from .training import NumericalError, evaluate, load_model, single_threaded, train

log = logging.getLogger("qcount")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def load_data(cfg: RunConfig, split: str) -> CountingData:
    if cfg.data_root:
        return load_split(cfg.data_root, split)
    return generate_split(cfg.data, split)


def _csv_list(text, cast=str):
    return [cast(x) for x in text.split(",") if x.strip()]


def cmd_gen_data(args):
    try:
        spec = DatasetSpec.from_json(json.loads(Path(args.spec).read_text()))
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad dataset spec {args.spec}: {exc}") from exc
    root = generate(spec, args.out)
    print(json.dumps({"root": str(root), **{k: len(v) for k, v in spec.splits.items()}}))


def cmd_train(args):
    cfg = load_config(args.config)
    if args.variant:
        cfg = replace(cfg, variant=args.variant)
        parse_variant(cfg.variant)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(replace(cfg, seeds=(seed,)), out / "config.json")
    result = train(cfg, load_data(cfg, "train"), load_data(cfg, "val"), out_dir=out, seed=seed,
                   resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint), "best": result.best}))


def cmd_eval(args):
    override = load_config(args.config) if args.config else None
    model, vocab, cfg, _ = load_model(args.ckpt, override)
    cfg = override or cfg
    data = load_data(cfg, args.split)
    force_w = tuple(_csv_list(args.force_w, float)) if args.force_w else None
    records, summary = evaluate(model, vocab, data, cfg.eval_levels, cfg.batch_size, force_w=force_w)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / f"metrics_{args.split}.csv",
                              [(cfg.variant, args.split, k, v) for k, v in summary.items()])
    metrics.write_summary_json(out / f"summary_{args.split}.json", {cfg.variant: summary})
    with open(out / f"records_{args.split}.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps({"image_id": r.image_id, "class_name": r.class_name, "gt_count": r.gt_count,
                                 "pred_count": r.pred_count, "similarity": r.similarity}) + "\n")
    print(json.dumps(summary))


def cmd_ablate(args):
    cfg = load_config(args.config)
    variants = _csv_list(args.variants)
    seeds = _csv_list(args.seeds, int) if args.seeds else list(cfg.seeds)
    outcomes = ablation.run_ablation(cfg, variants, seeds, load_data(cfg, "train"), load_data(cfg, "val"),
                                     out_dir=args.out)
    print(ablation.render_table(ablation.aggregate(outcomes)), end="")


def cmd_prompts(args):
    try:
        ps = generate_prompt_set(args.class_name, args.count, args.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    counts = [ps.factual_count, *ps.counterfactual_counts]
    for i, (text, count) in enumerate(zip(ps.texts, counts)):
        print(json.dumps({"index": i, "role": "factual" if i == 0 else "counterfactual",
                          "count": count, "delta": ps.delta, "text": text}))


def cmd_plot(args):
    src = Path(args.source)
    if not src.exists():
        raise ConfigError(f"no such file {src}")
    agg = ablation.load_agg(src)
    out = Path(args.out) if args.out else src.parent / "plots"
    paths = ablation.plot_bars(agg, out)
    (out / "table.txt").write_text(ablation.render_table(agg))
    print(json.dumps([str(p) for p in paths]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcount", description="Quantity-aware text-prompted counting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    s.add_argument("--spec", required=True, help="dataset spec JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one (config, variant, seed) run")
    s.add_argument("--config", required=True)
    s.add_argument("--variant")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs/train")
    s.add_argument("--resume", help="train-state checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split (category prompts only)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--config", help="override the config stored in the checkpoint")
    s.add_argument("--force-w", help="fixed gate weights, e.g. 1,0")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare variants over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", required=True, help="comma separated variant flags")
    s.add_argument("--seeds", help="comma separated seeds (default: config seeds)")
    s.add_argument("--out", default="runs/ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("prompts", help="print a prompt set as JSON lines")
    s.add_argument("--class", dest="class_name", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--n", type=int, default=8)
    s.set_defaults(func=cmd_prompts)

    s = sub.add_parser("plot", help="bar plots and a text table from an ablation CSV or summary JSON")
    s.add_argument("--from", dest="source", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command in ("train", "eval", "ablate"):
        single_threaded()
    try:
        args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
