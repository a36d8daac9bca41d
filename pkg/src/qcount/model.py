"""End-to-end counting network: encoders, fusion, dual-stream decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .decoder import DACDecoder, DecoderConfig, DecoderOutput
from .encoders import (
    TextBatch,
    TextEncoder,
    VisionEncoder,
    VisionEncoderConfig,
    extract_category_embedding,
    pair_similarities,
)
from .fusion import Fusion, FusionConfig
from .layers import reseed


@dataclass
class ModelConfig:
    image_size: int = 128
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    vision_depth: int = 2
    text_depth: int = 1
    fusion_blocks: int = 4
    decoder_channels: tuple = (32, 16, 8)
    decoder_depth: int = 2
    adapter_heads: int = 1
    adapter_dim: int = 16

    def vision(self) -> VisionEncoderConfig:
        return VisionEncoderConfig(self.image_size, self.patch_size, self.embed_dim, self.vision_depth, self.heads)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.fusion_blocks, self.embed_dim, self.heads)

    def decoder(self, **flags) -> DecoderConfig:
        return DecoderConfig(
            image_size=self.image_size,
            embed_dim=self.embed_dim,
            token_grid=self.image_size // self.patch_size,
            channels=tuple(self.decoder_channels),
            transformer_depth=self.decoder_depth,
            heads=self.heads,
            adapter_heads=self.adapter_heads,
            adapter_dim=self.adapter_dim,
            **flags,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


@dataclass
class ModelOutput:
    decoded: DecoderOutput
    similarities: Optional[torch.Tensor]  # (B, K)
    global_visual: torch.Tensor


class CountingModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig = None, decoder_flags: dict = None, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.decoder_flags = dict(decoder_flags or {})
        reseed(init_seed, "vision")
        self.vision = VisionEncoder(self.cfg.vision())
        reseed(init_seed, "text")
        self.text = TextEncoder(vocab_size, self.cfg.embed_dim, self.cfg.heads, self.cfg.text_depth)
        reseed(init_seed, "fusion")
        self.fusion = Fusion(self.cfg.fusion())
        self.decoder = DACDecoder(self.cfg.decoder(**self.decoder_flags), init_seed=init_seed)

    def forward(
        self,
        images,
        category: Optional[TextBatch] = None,
        sim_prompts: Optional[TextBatch] = None,
        n_prompts: int = 0,
        force_w=None,
    ) -> ModelOutput:
        """Run the network.

        ``sim_prompts`` holds ``n_prompts`` rows per image (B * n_prompts rows,
        image-major) whose pooled embeddings are compared to the image. When
        ``category`` is None the category feature is taken from the first
        prompt of each image with its numeral row removed.
        """
        f_i, g = self.vision(images)
        b = images.shape[0]
        sims = None
        if sim_prompts is not None:
            emb = self.text(sim_prompts)
            pooled = emb.pooled.view(b, n_prompts, -1)
            sims = pair_similarities(g, pooled)
            if category is None:
                first = slice(None, None, n_prompts)
                emb.tokens, emb.num_mask, emb.pad_mask = (
                    emb.tokens[first], emb.num_mask[first], emb.pad_mask[first]
                )
                f_c = extract_category_embedding(emb)
        if category is not None:
            f_c = extract_category_embedding(self.text(category))
        elif sim_prompts is None:
            raise ValueError("need a category prompt or quantity prompts")
        f_v = self.fusion(f_i, f_c)
        return ModelOutput(self.decoder(f_v, force_w=force_w), sims, g)
