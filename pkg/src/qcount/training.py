"""Training loop, checkpointed train state, inference and evaluation."""
from __future__ import annotations

import json
import logging
import math
import random
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import metrics
from .config import RunConfig, Variant, parse_variant
from .encoders import TextBatch, cosine
from .io import CheckpointError, load_checkpoint, save_checkpoint
from .losses import (
    alignment_loss,
    build_patch_vectors,
    contrastive_loss,
    counting_loss,
    negatives_hinge,
    ranking_loss,
    total_loss,
)
from .model import CountingModel, ModelConfig
from .prompts import Vocabulary, category_negatives, generate_prompt_set, render, tokenize
from .synthdata import CountingData

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite loss during training; CLI exit code 3."""


def single_threaded():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    # softplus heads leave subnormal floats in the background; flushing them is ~1.5x faster on CPU
    torch.set_flush_denormal(True)


def to_tensor(images) -> torch.Tensor:
    """(B, H, W, 3) uint8 or float in [0, 1] -> (B, 3, H, W) float32."""
    x = torch.as_tensor(np.asarray(images))
    if x.dtype == torch.uint8:
        x = x.to(torch.float32) / 255.0
    return x.to(torch.float32).permute(0, 3, 1, 2).contiguous()


@dataclass
class PromptLayout:
    category: Optional[TextBatch]
    sims: Optional[TextBatch]
    n_prompts: int
    has_positive: bool
    n_quantity_neg: int
    n_category_neg: int


class PromptBuilder:
    """Builds the per-batch text inputs a variant needs."""

    def __init__(self, variant: Variant, vocab: Vocabulary, classes: Sequence[str], n_counterfactual: int):
        self.variant = variant
        self.vocab = vocab
        self.classes = sorted(classes)
        self.n = n_counterfactual

    def inference(self, class_names) -> TextBatch:
        return TextBatch.from_seqs([tokenize(render(None, c), self.vocab) for c in class_names])

    def training(self, class_names, counts, rng: random.Random) -> PromptLayout:
        v = self.variant
        if v.prompts == "category":
            return PromptLayout(self.inference(class_names), None, 0, False, 0, 0)
        n_cat = min(self.n, len(self.classes) - 1) if v.prompts in ("ctp", "cqtp") else 0
        texts = []
        for name, count in zip(class_names, counts):
            row = []
            if v.prompts in ("qtp", "cqtp"):
                ps = generate_prompt_set(name, int(count), self.n, v.policy)
                row = list(ps.texts) if v.factual else list(ps.texts[1:])
            else:
                row = [render(None, name)]
            if n_cat:
                num = int(count) if v.prompts == "cqtp" else None
                row += [render(num, other) for other in category_negatives(name, self.classes, n_cat, rng)]
            texts.append(row)
        k = len(texts[0])
        sims = TextBatch.from_seqs([tokenize(t, self.vocab) for row in texts for t in row])
        has_pos = v.prompts in ("ctp", "cqtp") or v.factual
        category = None if has_pos else self.inference(class_names)
        n_q = self.n if v.prompts in ("qtp", "cqtp") else 0
        return PromptLayout(category, sims, k, has_pos, n_q, n_cat)


def compute_losses(out, d_gt, variant: Variant, layout: PromptLayout, loss_cfg) -> dict:
    dec = out.decoded
    parts = {"count": counting_loss(dec.d_final, dec.d_cnn, dec.d_trans, d_gt), "align": None, "rank": None}
    if variant.align is not None and out.similarities is not None:
        s = out.similarities
        s_pos = s[:, 0] if layout.has_positive else None
        off = 1 if layout.has_positive else 0
        s_q = s[:, off:off + layout.n_quantity_neg]
        s_c = s[:, off + layout.n_quantity_neg:]
        align = 0
        if layout.n_quantity_neg:
            if variant.align == "vtc":
                align = align + contrastive_loss(s_pos, s_q)
            else:
                align = align + alignment_loss(
                    s_pos, s_q,
                    first_term=variant.align != "no_ft",
                    second_term=variant.align != "no_st",
                )
        if layout.n_category_neg:
            align = align + negatives_hinge(s_pos, s_c)
        parts["align"] = align
    if variant.rank is not None:
        vecs = build_patch_vectors(dec.d_cnn, dec.d_trans, d_gt, loss_cfg)
        parts["rank"] = ranking_loss(
            vecs, loss_cfg, cross=variant.rank != "srank", within=variant.rank != "crank"
        )
    parts["total"] = total_loss(parts["count"], parts["align"], parts["rank"], loss_cfg.mu)
    return parts


@dataclass
class TrainResult:
    model: CountingModel
    vocab: Vocabulary
    history: list
    best: dict
    checkpoint: Optional[Path] = None
    best_state: Optional[dict] = None  # parameters of the best-val epoch

    def best_model(self) -> CountingModel:
        """The model with its best-val parameters restored (final parameters if there was no val split)."""
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.model


def _lr_at(cfg: RunConfig, epoch: int) -> float:
    milestones = [int(round(f * cfg.epochs)) for f in cfg.optim.decay_at]
    return cfg.optim.lr * cfg.optim.decay_factor ** sum(epoch >= m for m in milestones)


def _epoch_rng(seed, epoch, tag):
    return (int(seed) * 7919 + epoch * 104729 + zlib.crc32(tag.encode())) % (2 ** 32)


def build_vocab(cfg: RunConfig, data: CountingData) -> Vocabulary:
    return Vocabulary(sorted(set(cfg.data.classes) | set(data.class_names)))


def build_model(cfg: RunConfig, vocab: Vocabulary, seed: int) -> CountingModel:
    return CountingModel(len(vocab), cfg.model, parse_variant(cfg.variant).decoder, init_seed=seed)


def train(
    cfg: RunConfig,
    train_data: CountingData,
    val_data: Optional[CountingData] = None,
    out_dir=None,
    seed: Optional[int] = None,
    resume=None,
    max_epochs: Optional[int] = None,
    on_epoch: Optional[Callable] = None,
) -> TrainResult:
    """Train one (config, seed) run.

    ``max_epochs`` stops early without changing the schedule (used to produce
    resumable partial runs). ``on_epoch`` receives each epoch's log record.
    """
    variant = parse_variant(cfg.variant)
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model, vocab, opt, state = load_train_state(resume, cfg)
        start_epoch, history, best = state["epoch"], state["history"], state["best"]
        seed = state["seed"]
        torch.set_rng_state(torch.tensor(state["torch_rng"], dtype=torch.uint8))
    else:
        vocab = build_vocab(cfg, train_data)
        model = build_model(cfg, vocab, seed)
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
        start_epoch, history, best = 0, [], {"val_mae": math.inf, "epoch": None}
        torch.manual_seed(seed)
    builder = PromptBuilder(variant, vocab, vocab.classes, cfg.n_counterfactual)
    best_state = None
    n = len(train_data)
    stop = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    events = open(out_dir / "events.jsonl", "a") if out_dir else None
    try:
        for epoch in range(start_epoch, stop):
            for group in opt.param_groups:
                group["lr"] = _lr_at(cfg, epoch)
            model.train()
            perm = np.random.default_rng(_epoch_rng(seed, epoch, "shuffle")).permutation(n)
            prompt_rng = random.Random(_epoch_rng(seed, epoch, "prompts"))
            sums = {"total": 0.0, "count": 0.0, "align": None, "rank": None}
            t0 = time.time()
            n_batches = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                batch = train_data.subset(idx)
                parts = train_step(model, opt, batch, builder, variant, cfg, prompt_rng)
                n_batches += 1
                for k in sums:
                    if parts[k] is not None:
                        sums[k] = (sums[k] or 0.0) + parts[k]
            record = {
                "event": "epoch",
                "epoch": epoch + 1,
                "lr": _lr_at(cfg, epoch),
                "seconds": round(time.time() - t0, 3),
                **{f"train_{k}": (None if v is None else v / n_batches) for k, v in sums.items()},
            }
            if val_data is not None and len(val_data):
                vm = validate(model, builder, val_data, cfg)
                record.update(vm)
                if vm["val_mae"] < best["val_mae"]:
                    best = {"val_mae": vm["val_mae"], "epoch": epoch + 1}
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                    if out_dir:
                        save_train_state(out_dir / "best.ckpt", model, vocab, opt, cfg, seed, epoch + 1, history + [record], best)
            history.append(record)
            if events:
                events.write(json.dumps(record) + "\n")
                events.flush()
            if on_epoch:
                on_epoch(record)
            log.info("epoch %d %s", epoch + 1, {k: v for k, v in record.items() if k != "event"})
            if out_dir:
                save_train_state(out_dir / "last.ckpt", model, vocab, opt, cfg, seed, epoch + 1, history, best)
    finally:
        if events:
            events.close()
    ckpt = None
    if out_dir:
        ckpt = out_dir / ("best.ckpt" if (out_dir / "best.ckpt").exists() else "last.ckpt")
    return TrainResult(model, vocab, history, best, ckpt, best_state)


def train_step(model, opt, batch: CountingData, builder, variant, cfg, prompt_rng) -> dict:
    images = to_tensor(batch.images)
    d_gt = torch.from_numpy(batch.densities)
    layout = builder.training(batch.class_names, batch.counts, prompt_rng)
    out = model(images, category=layout.category, sim_prompts=layout.sims, n_prompts=layout.n_prompts)
    parts = compute_losses(out, d_gt, variant, layout, cfg.loss)
    if not torch.isfinite(parts["total"]):
        raise NumericalError(_nan_report(batch, parts))
    opt.zero_grad(set_to_none=True)
    parts["total"].backward()
    if cfg.optim.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
    opt.step()
    return {k: (None if v is None else float(v.detach() if torch.is_tensor(v) else v)) for k, v in parts.items()}


def _nan_report(batch, parts) -> str:
    dump = {
        "image_ids": batch.image_ids.tolist(),
        "class_names": batch.class_names,
        "counts": batch.counts.tolist(),
        "losses": {k: (None if v is None else float(v.detach() if torch.is_tensor(v) else v)) for k, v in parts.items()},
    }
    return "non-finite loss; offending batch: " + json.dumps(dump)


@torch.no_grad()
def validate(model, builder, data: CountingData, cfg: RunConfig) -> dict:
    dens = predict_density(model, builder.vocab, data.images, data.class_names, cfg.batch_size)
    gt = data.densities.astype(np.float64)
    sse = ((dens.astype(np.float64) - gt) ** 2).sum(axis=(1, 2)).mean()
    err = dens.sum(axis=(1, 2), dtype=np.float64) - data.counts
    return {"val_count_loss": float(sse), "val_mae": float(np.abs(err).mean()),
            "val_rmse": float(np.sqrt((err ** 2).mean()))}


@torch.no_grad()
def predict_density(model, vocab, images, class_names, batch_size=16, stream="final", force_w=None) -> np.ndarray:
    """Inference path: category prompt only, no quantity prompts. Returns (n, H, W)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(class_names), batch_size):
            imgs = to_tensor(images[start:start + batch_size])
            names = class_names[start:start + batch_size]
            cat = TextBatch.from_seqs([tokenize(render(None, c), vocab) for c in names])
            dec = model(imgs, category=cat, force_w=force_w).decoded
            d = {"final": dec.d_final, "cnn": dec.d_cnn, "trans": dec.d_trans}[stream]
            if d is None:
                raise ValueError(f"model has no {stream} stream")
            out.append(d.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


@torch.no_grad()
def similarity_trace(model, vocab, data: CountingData, batch_size=64):
    """Positive-pair cosine similarity per image (image-id order) and its mean.

    This is a diagnostic pass: it builds the factual quantity prompt from the
    ground-truth count, so it is kept apart from prediction.
    """
    was_training = model.training
    model.eval()
    order = np.argsort(data.image_ids, kind="stable")
    values = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        imgs = to_tensor(data.images[idx])
        _, g = model.vision(imgs)
        texts = [render(int(data.counts[i]), data.class_names[i]) for i in idx]
        emb = model.text(TextBatch.from_seqs([tokenize(t, vocab) for t in texts]))
        values.extend(cosine(g, emb.pooled).tolist())
    model.train(was_training)
    return [float(v) for v in values], float(np.mean(values))


def evaluate(model, vocab, data: CountingData, levels=(0, 1, 2, 3), batch_size=16, with_similarity=True,
             force_w=None, stream="final"):
    """Records and summary metrics for one split."""
    dens = predict_density(model, vocab, data.images, data.class_names, batch_size, stream=stream, force_w=force_w)
    sims = None
    if with_similarity:
        values, _ = similarity_trace(model, vocab, data)
        sims = dict(zip(sorted(data.image_ids.tolist()), values))
    records = [
        metrics.make_record(
            data.image_ids[i], data.class_names[i], dens[i], data.densities[i], levels,
            gt_count=float(data.counts[i]),
            similarity=None if sims is None else sims[int(data.image_ids[i])],
        )
        for i in range(len(data))
    ]
    return records, metrics.summarize(records, levels)


# ---- checkpointed train state ---------------------------------------------------------


def save_train_state(path, model, vocab, opt, cfg: RunConfig, seed, epoch, history, best):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    opt_state = opt.state_dict()
    for idx, st in opt_state["state"].items():
        for k, v in st.items():
            tensors[f"optim/{idx}/{k}"] = torch.as_tensor(v, dtype=torch.float32)
    meta = {
        "config": cfg.to_json(),
        "vocab": vocab.to_json(),
        "seed": int(seed),
        "epoch": int(epoch),
        "history": history,
        "best": best,
        "optim_groups": json.loads(json.dumps(opt_state["param_groups"])),
        "torch_rng": torch.get_rng_state().tolist(),
    }
    save_checkpoint(path, tensors, meta)


def load_model(path, cfg: Optional[RunConfig] = None):
    """Rebuild the model stored in a checkpoint. Returns (model, vocab, cfg, metadata)."""
    tensors, meta = load_checkpoint(path)
    stored = RunConfig.from_json(meta["config"])
    if cfg is not None and cfg.model != stored.model:
        raise CheckpointError("checkpoint model dimensions do not match the config")
    cfg = cfg or stored
    vocab = Vocabulary.from_json(meta["vocab"])
    model = CountingModel(len(vocab), stored.model, parse_variant(stored.variant).decoder, init_seed=meta["seed"])
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not fit the model: {exc}") from exc
    return model, vocab, stored, meta


def load_train_state(path, cfg: RunConfig):
    model, vocab, stored, meta = load_model(path, cfg)
    tensors, _ = load_checkpoint(path)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    state = {}
    for name, t in tensors.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/")
            state.setdefault(int(idx), {})[key] = t
    groups = meta["optim_groups"]
    for g in groups:
        if isinstance(g.get("betas"), list):
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})
    return model, vocab, opt, meta
