from dataclasses import dataclass

import torch.nn as nn

from .encoders import CategoryEmbedding
from .layers import MLP, Attention


@dataclass
class FusionConfig:
    n_blocks: int = 4
    embed_dim: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("fusion needs at least one block")


class CrossBlock(nn.Module):
    """Visual tokens query category tokens; residual attention then residual MLP."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * 2)

    def forward(self, x, ctx, mask=None):
        x = x + self.attn(self.norm_q(x), self.norm_kv(ctx), mask=mask)
        return x + self.mlp(self.norm2(x))


class Fusion(nn.Module):
    """Stack of cross-attention blocks producing the category-prompted visual feature.

    No positional encoding is applied to the category tokens, so the output
    does not depend on their row order.
    """

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(CrossBlock(cfg.embed_dim, cfg.heads) for _ in range(cfg.n_blocks))

    def forward(self, f_i, f_c: CategoryEmbedding):
        if f_c.tokens.shape[1] == 0 or not bool(f_c.pad_mask.any(dim=1).all()):
            raise ValueError("empty category embedding")
        if f_c.tokens.shape[-1] != f_i.shape[-1]:
            raise ValueError("visual and category embedding widths differ")
        mask = f_c.pad_mask[:, None, None, :]
        x = f_i
        for blk in self.blocks:
            x = blk(x, f_c.tokens, mask=mask)
        return x

    def zero_init(self):
        for blk in self.blocks:
            blk.attn.zero_init()
            blk.mlp.zero_init()
