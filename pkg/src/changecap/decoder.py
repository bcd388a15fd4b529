"""Two-part causal caption decoder.

Unimodal layers encode text only and yield the contrastive sentence vector
(taken at the last real token); multimodal layers add cross-attention over
the encoder's spatial tokens and produce vocabulary logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab as V
from .errors import ConfigurationError
from .layers import FeedForward, MultiHeadAttention, causal_mask, sinusoidal_table


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    dim: int = 128
    num_heads: int = 4
    unimodal_layers: int = 2
    multimodal_layers: int = 2
    max_len: int = 40
    tie_weights: bool = True


class UnimodalLayer(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.ffn = FeedForward(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, mask):
        x = self.norm1(x + self.self_attn(x, x, attn_mask=mask))
        return self.norm2(x + self.ffn(x))


class MultimodalLayer(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.ffn = FeedForward(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, image_tokens, mask):
        x = self.norm1(x + self.self_attn(x, x, attn_mask=mask))
        x = self.norm2(x + self.cross_attn(x, image_tokens))
        return self.norm3(x + self.ffn(x))


class CaptionDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.embedding = nn.Embedding(config.vocab_size, d)
        nn.init.normal_(self.embedding.weight, std=0.02)
        self.register_buffer("pos_table", sinusoidal_table(config.max_len, d))
        self.unimodal = nn.ModuleList(
            UnimodalLayer(d, config.num_heads) for _ in range(config.unimodal_layers)
        )
        self.multimodal = nn.ModuleList(
            MultimodalLayer(d, config.num_heads) for _ in range(config.multimodal_layers)
        )
        if config.tie_weights:
            self.output_proj = None
        else:
            self.output_proj = nn.Linear(d, config.vocab_size, bias=False)

    def embed_tokens(self, token_ids):
        n = token_ids.shape[1]
        if n > self.config.max_len:
            raise ConfigurationError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        return self.embedding(token_ids) + self.pos_table[:n]

    def unimodal_forward(self, embedded, lengths):
        """Returns (s_seq (B, n, D), s_end (B, D)) with s_end at index length-1."""
        lengths = torch.as_tensor(lengths, device=embedded.device)
        if (lengths < 1).any() or (lengths > embedded.shape[1]).any():
            raise ConfigurationError("lengths must be in [1, n]")
        mask = causal_mask(embedded.shape[1], device=embedded.device)
        x = embedded
        for layer in self.unimodal:
            x = layer(x, mask)
        s_end = x[torch.arange(x.shape[0], device=x.device), lengths - 1]
        return x, s_end

    def multimodal_forward(self, s_seq, image_tokens):
        """(B, n, D) text states + (B, T, D) image tokens -> (B, n, |V|) logits."""
        mask = causal_mask(s_seq.shape[1], device=s_seq.device)
        x = s_seq
        for layer in self.multimodal:
            x = layer(x, image_tokens, mask)
        if self.output_proj is None:
            return F.linear(x, self.embedding.weight)
        return self.output_proj(x)

    def forward(self, token_ids, image_tokens, lengths):
        s_seq, s_end = self.unimodal_forward(self.embed_tokens(token_ids), lengths)
        logits = self.multimodal_forward(s_seq, image_tokens)
        return logits, s_end

    @torch.no_grad()
    def generate(self, image_tokens, max_len: int | None = None):
        """Greedy decoding from the start token; returns (B, <=max_len) id rows."""
        max_len = max_len or self.config.max_len
        b = image_tokens.shape[0]
        device = image_tokens.device
        ids = torch.full((b, 1), V.START, dtype=torch.long, device=device)
        finished = torch.zeros(b, dtype=torch.bool, device=device)
        for _ in range(max_len - 1):
            embedded = self.embed_tokens(ids)
            mask = causal_mask(ids.shape[1], device=device)
            x = embedded
            for layer in self.unimodal:
                x = layer(x, mask)
            logits = self.multimodal_forward(x, image_tokens)
            next_id = logits[:, -1].argmax(dim=-1)
            next_id = torch.where(finished, torch.full_like(next_id, V.PAD), next_id)
            ids = torch.cat([ids, next_id.unsqueeze(1)], dim=1)
            finished |= next_id == V.END
            if bool(finished.all()):
                break
        return ids
