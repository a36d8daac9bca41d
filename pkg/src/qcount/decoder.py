"""Dual-stream density decoder: CNN stream, transformer stream, adapters and gate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MLP, Attention, Block, reseed


@dataclass
class DecoderConfig:
    image_size: int = 128
    embed_dim: int = 64
    token_grid: int = 16
    channels: tuple = (32, 16, 8)
    transformer_depth: int = 2
    heads: int = 4
    adapter_heads: int = 1
    adapter_dim: int = 16
    # stage (1-based) -> transformer block (1-based); None = one adapter per stage
    adapter_map: Optional[dict] = None
    use_cnn: bool = True
    use_trans: bool = True
    t2c: bool = True
    c2t: bool = False
    use_ce: bool = True
    use_ca: bool = True
    gate: str = "learned"  # learned | avg

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.token_grid * 2 ** self.n_stages != self.image_size:
            raise ValueError(
                f"token grid {self.token_grid} x 2^{self.n_stages} != image size {self.image_size}"
            )
        if not (self.use_cnn or self.use_trans):
            raise ValueError("decoder needs at least one stream")
        if self.adapter_map is None:
            self.adapter_map = {i: min(i, self.transformer_depth) for i in range(1, self.n_stages + 1)}
        else:
            self.adapter_map = {int(k): int(v) for k, v in self.adapter_map.items()}
        if len(self.adapter_map) > self.n_stages:
            raise ValueError("more adapters than CNN stages")
        for stage, blk in self.adapter_map.items():
            if not 1 <= stage <= self.n_stages or not 1 <= blk <= self.transformer_depth:
                raise ValueError(f"bad adapter placement {stage} -> {blk}")
        if self.gate not in ("learned", "avg"):
            raise ValueError(f"unknown gate mode {self.gate!r}")

    @property
    def n_stages(self) -> int:
        return len(self.channels)

    @property
    def bridges(self) -> bool:
        return self.use_cnn and self.use_trans


@dataclass
class DecoderOutput:
    d_cnn: Optional[torch.Tensor]  # (B, H, W)
    d_trans: Optional[torch.Tensor]
    d_final: torch.Tensor
    w: torch.Tensor  # (B, 2): weight of the CNN map, weight of the transformer map


def tokens_to_grid(tokens, grid):
    b, p, d = tokens.shape
    if p != grid * grid:
        raise ValueError(f"{p} tokens do not form a {grid}x{grid} grid")
    return tokens.transpose(1, 2).reshape(b, d, grid, grid)


class T2CAdapter(nn.Module):
    """Injects transformer-stream context into a CNN feature map.

    The cross-attention branch lets every CNN location query the transformer
    tokens; the channel-excitation branch re-weights CNN channels with a gate
    computed from the pooled transformer tokens. Returns the sum of both
    branches, which the caller adds to the CNN feature.
    """

    def __init__(self, channels, token_dim, heads=1, attn_dim=16, use_ca=True, use_ce=True, ce_bias=True,
                 init_seed=None, tag="t2c"):
        super().__init__()
        self.use_ca = use_ca
        self.use_ce = use_ce
        if use_ca:
            if init_seed is not None:
                reseed(init_seed, tag + ".ca")
            self.attn = Attention(channels, token_dim, heads=heads, attn_dim=attn_dim)
            self.norm = nn.LayerNorm(channels)
            self.mlp = MLP(channels, channels * 2)
        if use_ce:
            if init_seed is not None:
                reseed(init_seed, tag + ".ce")
            self.excite = nn.Sequential(
                nn.Linear(token_dim, token_dim // 2, bias=ce_bias),
                nn.ReLU(),
                nn.Linear(token_dim // 2, channels, bias=ce_bias),
            )
        if not (use_ca or use_ce):
            raise ValueError("adapter with neither branch")

    def forward(self, f_cnn, f_trans):
        b, c, h, w = f_cnn.shape
        out = 0
        if self.use_ce:
            if self.excite[-1].out_features != c:
                raise ValueError(f"adapter built for {self.excite[-1].out_features} channels, got {c}")
            gate = torch.sigmoid(self.excite(f_trans.mean(dim=1)))
            out = out + f_cnn * gate[:, :, None, None]
        if self.use_ca:
            if self.norm.normalized_shape[0] != c:
                raise ValueError(f"adapter built for {self.norm.normalized_shape[0]} channels, got {c}")
            q = f_cnn.flatten(2).transpose(1, 2)
            a = self.attn(q, f_trans)
            a = a + self.mlp(self.norm(a))
            out = out + a.transpose(1, 2).reshape(b, c, h, w)
        return out

    def zero_init_ca(self):
        if self.use_ca:
            self.attn.zero_init()
            self.mlp.zero_init()


class C2TAdapter(nn.Module):
    """Reverse-direction adapter (CNN context into transformer tokens), ablation only."""

    def __init__(self, channels, token_dim, heads=1, attn_dim=16):
        super().__init__()
        self.attn = Attention(token_dim, channels, heads=heads, attn_dim=attn_dim)
        self.norm = nn.LayerNorm(token_dim)
        self.mlp = MLP(token_dim, token_dim * 2)
        self.excite = nn.Sequential(
            nn.Linear(channels, token_dim // 2), nn.ReLU(), nn.Linear(token_dim // 2, token_dim)
        )

    def forward(self, f_trans, f_cnn):
        kv = f_cnn.flatten(2).transpose(1, 2)
        a = self.attn(f_trans, kv)
        a = a + self.mlp(self.norm(a))
        gate = torch.sigmoid(self.excite(f_cnn.mean(dim=(2, 3))))
        return a + f_trans * gate[:, None, :]


class GatingNet(nn.Module):
    def __init__(self, dim, hidden=32):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def logits(self, f_v):
        return self.fc2(F.relu(self.fc1(f_v.mean(dim=1))))

    def forward(self, f_v):
        return torch.softmax(self.logits(f_v), dim=-1)


# Heads predict density in units of DENSITY_SCALE so per-pixel values (~1e-3) are not
# swamped by a single optimiser step; the bias starts every pixel near that level.
DENSITY_SCALE = 1e-2
HEAD_BIAS = 0.2


HEAD_BETA = 10.0


def head_activation(x):
    # a sharp softplus: near-zero background like a ReLU, but never a dead gradient
    return F.softplus(x, beta=HEAD_BETA)


class DACDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, init_seed=0):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.use_cnn:
            reseed(init_seed, "decoder.cnn")
            ins = (d,) + cfg.channels[:-1]
            self.convs = nn.ModuleList(
                nn.Conv2d(i, o, 3, padding=1) for i, o in zip(ins, cfg.channels)
            )
            self.head_cnn = nn.Conv2d(cfg.channels[-1], 1, 1)
        if cfg.use_trans:
            reseed(init_seed, "decoder.trans")
            self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.transformer_depth))
            self.norm_trans = nn.LayerNorm(d)
            self.head_trans = nn.Conv2d(d, 1, 1)
        if cfg.bridges and cfg.t2c:
            reseed(init_seed, "decoder.t2c")
            self.t2c = nn.ModuleDict({
                str(stage): T2CAdapter(
                    cfg.channels[stage - 1], d, cfg.adapter_heads, cfg.adapter_dim,
                    use_ca=cfg.use_ca, use_ce=cfg.use_ce, init_seed=init_seed, tag=f"decoder.t2c.{stage}",
                )
                for stage in cfg.adapter_map
            })
        if cfg.bridges and cfg.c2t:
            reseed(init_seed, "decoder.c2t")
            self.c2t = nn.ModuleDict({
                str(stage): C2TAdapter(cfg.channels[stage - 1], d, cfg.adapter_heads, cfg.adapter_dim)
                for stage in range(1, min(cfg.n_stages, cfg.transformer_depth) + 1)
            })
        if cfg.bridges and cfg.gate == "learned":
            reseed(init_seed, "decoder.gate")
            self.gate = GatingNet(d)
        for name in ("head_cnn", "head_trans"):
            head = getattr(self, name, None)
            if head is not None:
                reseed(init_seed, f"decoder.{name}")
                nn.init.normal_(head.weight, std=0.01)
                nn.init.constant_(head.bias, HEAD_BIAS)

    def gate_weights(self, f_v):
        b = f_v.shape[0]
        if not self.cfg.use_trans:
            return f_v.new_tensor([1.0, 0.0]).expand(b, 2)
        if not self.cfg.use_cnn:
            return f_v.new_tensor([0.0, 1.0]).expand(b, 2)
        if self.cfg.gate == "avg":
            return f_v.new_full((b, 2), 0.5)
        return self.gate(f_v)

    def forward(self, f_v, force_w=None) -> DecoderOutput:
        cfg = self.cfg
        size = cfg.image_size
        grid = tokens_to_grid(f_v, cfg.token_grid)
        t = f_v
        trans_outs = []
        x = grid
        for stage in range(1, cfg.n_stages + 1):
            if cfg.use_cnn:
                x = F.relu(self.convs[stage - 1](x))
            if cfg.use_trans and stage <= cfg.transformer_depth:
                t = self.blocks[stage - 1](t)
                if cfg.use_cnn and cfg.c2t:
                    t = t + self.c2t[str(stage)](t, x)
                trans_outs.append(t)
            if cfg.use_cnn:
                if cfg.bridges and cfg.t2c and stage in cfg.adapter_map:
                    x = x + self.t2c[str(stage)](x, trans_outs[cfg.adapter_map[stage] - 1])
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if cfg.use_trans:
            for blk in self.blocks[len(trans_outs):]:
                t = blk(t)
        d_cnn = d_trans = None
        if cfg.use_cnn:
            d_cnn = head_activation(self.head_cnn(x))[:, 0] * DENSITY_SCALE
        if cfg.use_trans:
            g = tokens_to_grid(self.norm_trans(t), cfg.token_grid)
            d_trans = head_activation(self.head_trans(g)) * DENSITY_SCALE
            d_trans = F.interpolate(d_trans, size=(size, size), mode="bilinear", align_corners=False)[:, 0]
        w = self.gate_weights(f_v) if force_w is None else f_v.new_tensor(force_w).expand(f_v.shape[0], 2)
        if d_cnn is None:
            d_final = d_trans
        elif d_trans is None:
            d_final = d_cnn
        else:
            d_final = w[:, 0, None, None] * d_cnn + w[:, 1, None, None] * d_trans
        return DecoderOutput(d_cnn, d_trans, d_final, w)
