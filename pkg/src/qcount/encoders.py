"""Small trainable vision and text encoders plus the vision-text similarity tap."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Block
from .prompts import PAD_ID, TokenSeq

MAX_COUNT = 4096
MAX_TEXT_LEN = 16


class DegenerateEmbeddingError(ValueError):
    """A zero-norm embedding was passed to a cosine similarity."""


@dataclass
class VisionEncoderConfig:
    image_size: int = 128
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2


class VisionEncoder(nn.Module):
    """Patchify, add learned positions, run a few transformer blocks, project."""

    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.n_patches, d) * 0.02)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)

    def forward(self, images):
        """images: (B, 3, H, W) in [0, 1]. Returns (patch tokens (B, P, d), global (B, d))."""
        s = self.cfg.image_size
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[-2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) images, got {tuple(images.shape)}")
        x = self.patch_embed(images - 0.5).flatten(2).transpose(1, 2)
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        tokens = self.proj(self.norm(x))
        return tokens, tokens.mean(dim=1)


def value_encoding(values, dim, max_period=2.0 * MAX_COUNT):
    """Sinusoidal features of integer counts; (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    angles = values.to(torch.float64)[..., None] * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return enc


@dataclass
class TextBatch:
    """Padded batch of token sequences (B, T)."""

    ids: torch.Tensor
    values: torch.Tensor
    num_mask: torch.Tensor  # True at numeral slots
    pad_mask: torch.Tensor  # True at real tokens

    @classmethod
    def from_seqs(cls, seqs: Sequence[TokenSeq]) -> "TextBatch":
        if not seqs:
            raise ValueError("empty batch of token sequences")
        t = max(len(s) for s in seqs)
        if t > MAX_TEXT_LEN:
            raise ValueError(f"prompt longer than {MAX_TEXT_LEN} tokens")
        ids = torch.full((len(seqs), t), PAD_ID, dtype=torch.long)
        values = torch.zeros((len(seqs), t), dtype=torch.long)
        num_mask = torch.zeros((len(seqs), t), dtype=torch.bool)
        pad_mask = torch.zeros((len(seqs), t), dtype=torch.bool)
        for i, s in enumerate(seqs):
            if len(s) == 0:
                raise ValueError("empty token sequence")
            n = len(s)
            ids[i, :n] = torch.tensor(s.ids)
            values[i, :n] = torch.tensor(s.values)
            pad_mask[i, :n] = True
            if s.num_position is not None:
                num_mask[i, s.num_position] = True
        return cls(ids, values, num_mask, pad_mask)


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # (B, T, d) = full prompt features
    pooled: torch.Tensor  # (B, d)
    num_mask: torch.Tensor
    pad_mask: torch.Tensor

    @property
    def num_position(self) -> Optional[int]:
        """Numeral index of the first sequence (single-prompt convenience)."""
        idx = self.num_mask[0].nonzero()
        return int(idx[0, 0]) if len(idx) else None


@dataclass
class CategoryEmbedding:
    tokens: torch.Tensor  # (B, T', d)
    pad_mask: torch.Tensor  # (B, T')


class TextEncoder(nn.Module):
    """Token table + numeral value encoding + one transformer layer, mean pooled.

    Class and template tokens never attend to the numeral, and positions are
    counted over non-numeral tokens only, so removing the numeral row after
    encoding gives exactly the encoding of the count-free prompt.
    """

    def __init__(self, vocab_size, dim=64, heads=4, depth=1):
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim)
        self.num_base = nn.Parameter(torch.randn(dim) * 0.02)
        self.pos = nn.Parameter(torch.randn(MAX_TEXT_LEN, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.numeral_calls = 0  # instrumentation: batches that carried a numeral

    def embed_tokens(self, batch: TextBatch):
        """Embedding-table output before any token mixing."""
        x = self.embed(batch.ids)
        word_pos = (torch.cumsum((~batch.num_mask).long(), dim=1) - 1).clamp(min=0)
        x = x + self.pos[word_pos] * (~batch.num_mask)[..., None]
        if batch.num_mask.any():
            self.numeral_calls += 1
            num = self.num_base + value_encoding(batch.values, self.dim).to(x.dtype)
            x = torch.where(batch.num_mask[..., None], num, x)
        return x

    def forward(self, batch: TextBatch) -> TextEmbedding:
        x = self.embed_tokens(batch)
        keys = batch.pad_mask & ~batch.num_mask
        mask = keys[:, None, :].expand(-1, x.shape[1], -1).clone()
        # the numeral row reads everything; padded rows read slot 0
        mask[batch.num_mask] = batch.pad_mask[batch.num_mask.nonzero()[:, 0]]
        mask[:, :, 0] |= ~batch.pad_mask
        mask = mask[:, None]
        for blk in self.blocks:
            x = blk(x, mask=mask)
        x = self.norm(x)
        w = batch.pad_mask[..., None].to(x.dtype)
        pooled = (x * w).sum(1) / w.sum(1)
        return TextEmbedding(x, pooled, batch.num_mask, batch.pad_mask)


def encode_text(seq: TokenSeq, encoder: TextEncoder) -> TextEmbedding:
    return encoder(TextBatch.from_seqs([seq]))


def extract_category_embedding(emb: TextEmbedding) -> CategoryEmbedding:
    """Drop the numeral row of every sequence; identity for count-free prompts."""
    keep = emb.pad_mask & ~emb.num_mask
    if not emb.num_mask.any():
        return CategoryEmbedding(emb.tokens, emb.pad_mask)
    lengths = keep.sum(1)
    t = int(lengths.max())
    b, _, d = emb.tokens.shape
    order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)[:, :t]
    tokens = torch.gather(emb.tokens, 1, order[..., None].expand(b, t, d))
    pad_mask = torch.arange(t)[None, :] < lengths[:, None]
    tokens = tokens * pad_mask[..., None].to(tokens.dtype)
    return CategoryEmbedding(tokens, pad_mask)


def cosine(a, b, eps=1e-12):
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if bool((na < eps).any()) or bool((nb < eps).any()):
        raise DegenerateEmbeddingError("zero-norm embedding in cosine similarity")
    return (a * b).sum(-1) / (na * nb)


def pair_similarities(global_visual, prompt_pooled):
    """Cosine similarity of each image to its prompts.

    global_visual: (B, d); prompt_pooled: (B, K, d) ordered factual first.
    Returns (B, K): column 0 is the positive pair, the rest the negatives.
    """
    return cosine(global_visual[:, None, :], prompt_pooled).clamp(-1.0, 1.0)
