"""Counting, quantity-alignment and cross-stream ranking losses.

Hinges use ``torch.relu``, whose subgradient at exactly zero is 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    mu: float = 0.1
    patch_grid: int = 256  # number of ranking patches n
    rank_interval: int = 5  # l

    def __post_init__(self):
        side = math.isqrt(self.patch_grid)
        if side * side != self.patch_grid:
            raise ValueError(f"patch_grid must be a perfect square, got {self.patch_grid}")
        if not 1 <= self.rank_interval < self.patch_grid:
            raise ValueError("rank_interval must satisfy 1 <= l < n")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


def _as_batch(x):
    return x[None] if x.dim() == 2 else x


def counting_loss(d_final, d_cnn, d_trans, d_gt):
    """Per-image sum of squared errors over the available maps, mean over batch.

    ``d_cnn`` or ``d_trans`` may be None for single-stream decoders.
    """
    d_gt = _as_batch(d_gt)
    total = 0
    for pred in (d_final, d_cnn, d_trans):
        if pred is None:
            continue
        pred = _as_batch(pred)
        if pred.shape != d_gt.shape:
            raise ValueError(f"density shapes differ: {tuple(pred.shape)} vs {tuple(d_gt.shape)}")
        total = total + ((pred - d_gt) ** 2).sum(dim=(-2, -1))
    return total.mean()


def alignment_loss(s_pos, s_neg, first_term=True, second_term=True):
    """Quantity alignment hinge loss.

    s_pos: (B,) similarity of the factual pair, or None when factual prompts
    are not used. s_neg: (B, N) negatives, first half the below-count prompts,
    second half the above-count prompts, each half farthest count first.
    Returns the batch mean.
    """
    if s_neg.dim() == 1:
        s_neg = s_neg[None]
        s_pos = None if s_pos is None else s_pos.reshape(1)
    n = s_neg.shape[1]
    if n < 4 or n % 2:
        raise ValueError(f"alignment loss needs an even number of negatives >= 4, got {n}")
    half = n // 2
    loss = s_neg.new_zeros(s_neg.shape[0])
    if first_term and s_pos is not None:
        loss = loss + torch.relu(s_neg - s_pos[:, None]).sum(1) / n
    if second_term:
        lo, hi = s_neg[:, :half], s_neg[:, half:]
        order = torch.relu(lo[:, :-1] - lo[:, 1:]).sum(1) + torch.relu(hi[:, :-1] - hi[:, 1:]).sum(1)
        loss = loss + order / (n - 2)
    return loss.mean()


def negatives_hinge(s_pos, s_neg):
    """First-term-only hinge for unordered negatives (category counterfactuals)."""
    return torch.relu(s_neg - s_pos[:, None]).mean(1).mean()


def contrastive_loss(s_pos, s_neg, temperature=0.07):
    """InfoNCE over one positive and its negatives; reference for the vtc ablation."""
    logits = torch.cat([s_pos[:, None], s_neg], dim=1) / temperature
    return F.cross_entropy(logits, logits.new_zeros(logits.shape[0], dtype=torch.long))


@dataclass
class PatchCountVectors:
    v_cnn: Optional[torch.Tensor]  # (B, n) in descending ground-truth order
    v_trans: Optional[torch.Tensor]
    gt_order: torch.Tensor  # (B, n) patch indices, row-major


def patch_counts(density, n_patches):
    """Sum a (B, H, W) map over an s x s grid of equal patches -> (B, s*s), row-major."""
    density = _as_batch(density)
    side = math.isqrt(n_patches)
    b, h, w = density.shape
    if side * side != n_patches or h % side or w % side:
        raise ValueError(f"{h}x{w} map cannot be split into {n_patches} equal patches")
    ph, pw = h // side, w // side
    return density.reshape(b, side, ph, side, pw).sum(dim=(2, 4)).reshape(b, n_patches)


def build_patch_vectors(d_cnn, d_trans, d_gt, cfg: LossConfig) -> PatchCountVectors:
    gt = patch_counts(d_gt, cfg.patch_grid)
    order = torch.argsort(-gt, dim=1, stable=True)
    v_cnn = None if d_cnn is None else torch.gather(patch_counts(d_cnn, cfg.patch_grid), 1, order)
    v_trans = None if d_trans is None else torch.gather(patch_counts(d_trans, cfg.patch_grid), 1, order)
    return PatchCountVectors(v_cnn, v_trans, order)


def ranking_loss(v: PatchCountVectors, cfg: LossConfig, cross=True, within=True):
    """Interval-``l`` ranking hinges within and across the two streams, batch mean.

    With one stream missing only its within-stream term remains.
    """
    l = cfg.rank_interval
    ref = v.v_cnn if v.v_cnn is not None else v.v_trans
    n = ref.shape[-1]
    if n <= l:
        raise ValueError(f"need more patches ({n}) than the rank interval ({l})")

    def hinge(later, earlier):
        return torch.relu(later[..., l:] - earlier[..., : n - l]).sum(-1)

    total = ref.new_zeros(ref.shape[:-1])
    both = v.v_cnn is not None and v.v_trans is not None
    if cross and both:
        total = total + hinge(v.v_cnn, v.v_trans) + hinge(v.v_trans, v.v_cnn)
    if within:
        for vec in (v.v_trans, v.v_cnn):
            if vec is not None:
                total = total + hinge(vec, vec)
    return (total / (n - l)).mean()


def total_loss(count, align=None, rank=None, mu=0.1):
    """Counting loss plus ``mu`` times whichever auxiliary terms are present."""
    aux = 0
    if align is not None:
        aux = aux + align
    if rank is not None:
        aux = aux + rank
    return count + mu * aux
