"""Transformer building blocks shared by the autoencoder and the denoiser."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=std)


class Attention(nn.Module):
    """Multi-head attention with optional RMS query-key normalisation.

    ``key_padding_mask`` is True at positions that may be attended to.
    """

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None,
                 qk_norm: bool = True, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.head_dim = dim // heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(kv_dim, dim)
        self.to_v = nn.Linear(kv_dim, dim)
        self.to_out = nn.Linear(dim, dim)
        self.qk_norm = qk_norm
        if qk_norm:
            self.q_norm = nn.RMSNorm(self.head_dim)
            self.k_norm = nn.RMSNorm(self.head_dim)
        self.dropout = dropout

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_padding_mask: Optional[torch.Tensor] = None,
                causal: bool = False) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        if self.qk_norm:
            q, k = self.q_norm(q), self.k_norm(k)
        mask = None
        if key_padding_mask is not None:
            mask = key_padding_mask[:, None, None, :]
        if causal:
            n, m = q.shape[-2], k.shape[-2]
            tri = torch.ones(n, m, dtype=torch.bool, device=x.device).tril(m - n)
            mask = tri if mask is None else mask & tri
        out = F.scaled_dot_product_attention(
            q, k, v, attn_mask=mask,
            dropout_p=self.dropout if self.training else 0.0)
        out = out.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult), nn.GELU(), nn.Dropout(dropout), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class GEGLU(nn.Module):
    """Gated-GELU feedforward."""

    def __init__(self, dim: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        hidden = dim * mult
        self.proj_in = nn.Linear(dim, hidden * 2)
        self.drop = nn.Dropout(dropout)
        self.proj_out = nn.Linear(hidden, dim)

    def forward(self, x):
        h, gate = self.proj_in(x).chunk(2, dim=-1)
        return self.proj_out(self.drop(h * F.gelu(gate)))


class TransformerLayer(nn.Module):
    """Pre-LN block: self-attention, optional cross-attention, feedforward."""

    def __init__(self, dim: int, heads: int, *, cross_dim: Optional[int] = None,
                 causal: bool = False, qk_norm: bool = True, dropout: float = 0.0):
        super().__init__()
        self.causal = causal
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, qk_norm=qk_norm)
        self.cross = None
        if cross_dim is not None:
            self.norm_cross = nn.LayerNorm(dim)
            self.cross = Attention(dim, heads, kv_dim=cross_dim, qk_norm=qk_norm)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dropout=dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask=None, context=None, context_mask=None):
        x = x + self.drop(self.attn(self.norm_attn(x), key_padding_mask=mask, causal=self.causal))
        if self.cross is not None:
            x = x + self.drop(self.cross(self.norm_cross(x), context, key_padding_mask=context_mask))
        return x + self.drop(self.ff(self.norm_ff(x)))


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal features with a geometric ladder of periods from 1 to ``max_period``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=values.dtype,
                                                         device=values.device) / half)
    args = values[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
