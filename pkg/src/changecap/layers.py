"""Shared transformer building blocks."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigurationError


class MultiHeadAttention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections.

    Masks are boolean with True marking blocked positions.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, key_value, attn_mask=None):
        b, tq, _ = query.shape
        tk = key_value.shape[1]
        h, d = self.num_heads, self.head_dim

        q = self.q_proj(query).view(b, tq, h, d).transpose(1, 2)
        k = self.k_proj(key_value).view(b, tk, h, d).transpose(1, 2)
        v = self.v_proj(key_value).view(b, tk, h, d).transpose(1, 2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(d)
        if attn_mask is not None:
            scores = scores.masked_fill(attn_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_mult * dim)
        self.fc2 = nn.Linear(hidden_mult * dim, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean (n, n) mask, True above the diagonal (future positions blocked)."""
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


def sinusoidal_table(max_len: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal positional encodings: sin on even dims, cos on odd."""
    pos = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, idx / dim)
    table = torch.zeros(max_len, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.to(torch.get_default_dtype())
