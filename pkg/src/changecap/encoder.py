"""Bi-temporal image-pair encoder.

Pipeline: siamese conv backbone -> learnable positional grid -> stacked
hierarchical attention (self + cross between the two time steps, weights
shared across streams) -> concat fusion with a per-location cosine mask ->
1x1 reduction plus residual block -> spatial encoding E_cap, attentively
pooled to a single contrastive vector E_con.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError
from .layers import FeedForward, MultiHeadAttention


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    dim: int = 128
    num_heads: int = 4
    hsa_layers: int = 2
    backbone_channels: tuple = (32, 64, 128)  # one stride-2 stage per entry; last must equal dim

    def __post_init__(self):
        if self.backbone_channels[-1] != self.dim:
            raise ConfigurationError("last backbone channel count must equal dim")
        if self.image_size % (2 ** len(self.backbone_channels)) != 0:
            raise ConfigurationError("image_size must be divisible by the backbone stride")

    @property
    def grid_size(self) -> int:
        return self.image_size // (2 ** len(self.backbone_channels))


class ConvBackbone(nn.Module):
    """Small scratch-trained conv net; one stride-2 conv + ReLU per stage."""

    def __init__(self, channels):
        super().__init__()
        stages = []
        prev = 3
        for ch in channels:
            stages.append(nn.Sequential(nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU()))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x

    def set_finetune(self, policy: str):
        """frozen: no backbone grads; last2: only last two stages train; full: all."""
        if policy not in ("frozen", "last2", "full"):
            raise ConfigurationError(f"unknown backbone finetune policy {policy!r}")
        for i, stage in enumerate(self.stages):
            trainable = policy == "full" or (policy == "last2" and i >= len(self.stages) - 2)
            for p in stage.parameters():
                p.requires_grad_(trainable)


class HSALayer(nn.Module):
    """One hierarchical attention layer applied symmetrically to both streams."""

    def __init__(self, dim, num_heads):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.ffn = FeedForward(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, f1, f2):
        a1 = self.norm1(f1 + self.self_attn(f1, f1))
        a2 = self.norm1(f2 + self.self_attn(f2, f2))
        c1 = self.norm2(a1 + self.cross_attn(a1, a2))
        c2 = self.norm2(a2 + self.cross_attn(a2, a1))
        o1 = self.norm3(c1 + self.ffn(c1))
        o2 = self.norm3(c2 + self.ffn(c2))
        return o1, o2


def cosine_mask(i1, i2):
    """Per-token cosine similarity; defined as 0 where either vector is zero."""
    dot = (i1 * i2).sum(dim=-1)
    n1 = i1.norm(dim=-1)
    n2 = i2.norm(dim=-1)
    denom = n1 * n2
    cos = torch.where(denom > 0, dot / denom.clamp_min(1e-30), torch.zeros_like(dot))
    return cos


class ChangeEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        g = config.grid_size
        self.backbone = ConvBackbone(config.backbone_channels)
        self.pos_embedding = nn.Parameter(torch.randn(g * g, d) * 0.02)
        self.hsa = nn.ModuleList(HSALayer(d, config.num_heads) for _ in range(config.hsa_layers))
        self.reduce = nn.Conv2d(2 * d, d, 1)
        self.res_block = nn.Sequential(
            nn.Conv2d(d, d, 1), nn.ReLU(), nn.Conv2d(d, d, 3, padding=1), nn.ReLU(), nn.Conv2d(d, d, 1)
        )
        self.pool_query = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.pool_attn = MultiHeadAttention(d, config.num_heads)

    def backbone_forward(self, image):
        """(B, H, W, 3) image -> (B, T, D) token grid, T = (H / stride)^2."""
        if image.shape[-3] != self.config.image_size or image.shape[-2] != self.config.image_size:
            raise ConfigurationError(
                f"expected {self.config.image_size}x{self.config.image_size} images, got {tuple(image.shape)}"
            )
        x = image.permute(0, 3, 1, 2)
        feat = self.backbone(x)  # B x D x g x g
        return feat.flatten(2).transpose(1, 2)

    def add_positional(self, tokens):
        return tokens + self.pos_embedding

    def hierarchical_self_attention(self, f1, f2):
        for layer in self.hsa:
            f1, f2 = layer(f1, f2)
        return f1, f2

    def fuse(self, i1, i2):
        """Concat along channels plus broadcast cosine mask: (B, T, 2D)."""
        cos = cosine_mask(i1, i2)
        return torch.cat([i1, i2], dim=-1) + cos.unsqueeze(-1)

    def project_residual(self, f_fus):
        """(B, T, 2D) -> (B, T, D) via 1x1 reduction and a conv residual block."""
        g = self.config.grid_size
        x = f_fus.transpose(1, 2).reshape(f_fus.shape[0], -1, g, g)
        c = self.reduce(x)
        e_cap = torch.relu(self.res_block(c) + c)
        return e_cap.flatten(2).transpose(1, 2)

    def attentive_pool(self, e_cap_tokens):
        query = self.pool_query.expand(e_cap_tokens.shape[0], 1, -1)
        return self.pool_attn(query, e_cap_tokens).squeeze(1)

    def forward(self, before, after):
        """Returns (e_cap tokens (B, T, D), e_con (B, D))."""
        f1 = self.add_positional(self.backbone_forward(before))
        f2 = self.add_positional(self.backbone_forward(after))
        i1, i2 = self.hierarchical_self_attention(f1, f2)
        e_cap = self.project_residual(self.fuse(i1, i2))
        e_con = self.attentive_pool(e_cap)
        return e_cap, e_con
