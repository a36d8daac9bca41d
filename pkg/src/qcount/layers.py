import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head attention where queries and keys/values may come from different streams.

    ``q_dim`` is the query/output width, ``kv_dim`` the key/value input width.
    """

    def __init__(self, q_dim, kv_dim=None, heads=4, attn_dim=None):
        super().__init__()
        kv_dim = kv_dim or q_dim
        attn_dim = attn_dim or q_dim
        if attn_dim % heads:
            raise ValueError(f"attention width {attn_dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(q_dim, attn_dim)
        self.k = nn.Linear(kv_dim, attn_dim)
        self.v = nn.Linear(kv_dim, attn_dim)
        self.out = nn.Linear(attn_dim, q_dim)

    def forward(self, x, context=None, mask=None):
        """``mask`` is boolean, True = may attend, broadcastable to (B, 1, Lq, Lk)."""
        context = x if context is None else context
        b, lq, _ = x.shape
        lk = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, lq, h, -1).transpose(1, 2)
        k = self.k(context).view(b, lk, h, -1).transpose(1, 2)
        v = self.v(context).view(b, lk, h, -1).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(y.transpose(1, 2).reshape(b, lq, -1))

    def zero_init(self):
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)


class MLP(nn.Sequential):
    def __init__(self, dim, hidden, out_dim=None, bias=True):
        super().__init__(
            nn.Linear(dim, hidden, bias=bias),
            nn.GELU(),
            nn.Linear(hidden, out_dim or dim, bias=bias),
        )

    def zero_init(self):
        nn.init.zeros_(self[-1].weight)
        if self[-1].bias is not None:
            nn.init.zeros_(self[-1].bias)


class Block(nn.Module):
    """Pre-norm transformer block: self-attention then MLP, both residual."""

    def __init__(self, dim, heads=4, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


def reseed(seed, tag):
    """Seed the global generator from (seed, tag) so each component's init is order-independent."""
    torch.manual_seed((int(seed) * 1_000_003 + zlib.crc32(tag.encode())) % (2 ** 63))
