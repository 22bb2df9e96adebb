"""Temporal backbone: token fusion, sinusoidal position features, one
pre-norm self-attention encoder layer, and a cross-attention prediction head
with one learned query per forecast horizon.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import DimensionMismatch, SchemaError


def positional_encoding(t: int | torch.Tensor, d_pe: int) -> torch.Tensor:
    """Sinusoidal features: even slots sin(t/10000^(2i/d)), odd slots cos."""
    if d_pe % 2 != 0:
        raise SchemaError("positional width must be even")
    tt = torch.as_tensor(t, dtype=torch.float64)
    if (tt < 0).any():
        raise ValueError("month index must be nonnegative")
    i = torch.arange(0, d_pe, 2, dtype=torch.float64)
    denom = torch.pow(torch.tensor(10000.0, dtype=torch.float64), i / d_pe)
    angles = tt.unsqueeze(-1) / denom
    pe = torch.zeros(*tt.shape, d_pe, dtype=torch.float64)
    pe[..., 0::2] = torch.sin(angles)
    pe[..., 1::2] = torch.cos(angles)
    return pe


def fuse(h: torch.Tensor, p: torch.Tensor, w_f: nn.Linear) -> torch.Tensor:
    """Concatenate the state embedding with the projected policy vector."""
    if p.shape[-1] != w_f.in_features:
        raise DimensionMismatch(
            f"policy vector width {p.shape[-1]} != projection input {w_f.in_features}"
        )
    return torch.cat([h, w_f(p)], dim=-1)


class MultiHeadAttention(nn.Module):
    """Standard multi-head attention with explicit projections.

    Exposes per-head attention weights so tests can check row normalization.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % n_heads != 0:
            raise DimensionMismatch(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """query: (B, Lq, d); key/value: (B, Lk, d). Returns (out, weights)
        with weights shaped (B, n_heads, Lq, Lk)."""
        b, lq, _ = query.shape
        lk = key.shape[1]

        def split(x, l):
            return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), lq)
        k = split(self.k_proj(key), lk)
        v = split(self.v_proj(value), lk)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        mixed = self.dropout(weights) @ v
        out = mixed.transpose(1, 2).reshape(b, lq, self.dim)
        return self.out_proj(out), weights


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer (self-attention + feed-forward)."""

    def __init__(self, dim: int, n_heads: int, ffw_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, dropout)
        self.drop1 = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffw = nn.Sequential(
            nn.Linear(dim, ffw_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffw_dim, dim)
        )
        self.drop2 = nn.Dropout(dropout)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        normed = self.norm1(x)
        attn_out, weights = self.attn(normed, normed, normed)
        self.last_attention = weights.detach()
        x = x + self.drop1(attn_out)
        x = x + self.drop2(self.ffw(self.norm2(x)))
        return x


class TemporalBackbone(nn.Module):
    """Sequence encoder plus parallel per-horizon cross-attention queries."""

    def __init__(
        self,
        hidden_dim: int,
        policy_dim: int,
        pe_dim: int,
        t_fut: int,
        n_heads: int = 4,
        ffw_mult: int = 4,
        dropout: float = 0.1,
        num_layers: int = 1,
        out_channels: int = 1,
        use_pe: bool = True,
    ):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.pe_dim = pe_dim if use_pe else 0
        self.use_pe = use_pe
        self.t_fut = t_fut
        self.policy_proj = nn.Linear(policy_dim, hidden_dim, bias=False)
        in_width = 2 * hidden_dim + self.pe_dim
        self.input_proj = nn.Linear(in_width, hidden_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(hidden_dim, n_heads, ffw_mult * hidden_dim, dropout)
            for _ in range(num_layers)
        )
        self.queries = nn.Parameter(torch.randn(t_fut, hidden_dim) * 0.02)
        self.cross = MultiHeadAttention(hidden_dim, n_heads, dropout)
        self.head = nn.Linear(hidden_dim, out_channels)
        self.last_cross_attention: torch.Tensor | None = None

    def build_tokens(
        self, h: torch.Tensor, p: torch.Tensor, month_index: torch.Tensor
    ) -> torch.Tensor:
        """h: (B, T_h, d); p: (B, T_h, d_p); month_index: (B, T_h)."""
        z = fuse(h, p, self.policy_proj)
        if self.use_pe:
            pe = positional_encoding(month_index, self.pe_dim)
            z = torch.cat([z, pe], dim=-1)
        return z

    def encode_sequence(self, z_hat: torch.Tensor) -> torch.Tensor:
        """z_hat: (B, T_h, 2d [+ d_pe]) -> contextual memory (B, T_h, d)."""
        if z_hat.shape[-1] != self.input_proj.in_features:
            raise DimensionMismatch(
                f"token width {z_hat.shape[-1]} != expected {self.input_proj.in_features}"
            )
        x = self.input_proj(z_hat)
        for layer in self.layers:
            x = layer(x)
        return x

    def predict(self, memory: torch.Tensor) -> torch.Tensor:
        """memory: (B, T_h, d) -> (B, T_f, out_channels)."""
        b = memory.shape[0]
        q = self.queries.unsqueeze(0).expand(b, -1, -1)
        mixed, weights = self.cross(q, memory, memory)
        self.last_cross_attention = weights.detach()
        return self.head(mixed)

    def forward(
        self, h: torch.Tensor, p: torch.Tensor, month_index: torch.Tensor
    ) -> torch.Tensor:
        return self.predict(self.encode_sequence(self.build_tokens(h, p, month_index)))
