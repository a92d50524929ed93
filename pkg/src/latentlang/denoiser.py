"""Transformer denoiser predicting the velocity ``v`` of a noisy latent."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion_math import x_from_v_at
from .layers import GEGLU, Attention, init_weights, sinusoidal_embedding

# alpha in [0, 1] is stretched before the sinusoidal features so the fast
# end of the frequency ladder resolves small changes in noise level
ALPHA_SCALE = 1000.0


@dataclass
class DenoiserConfig:
    latent_len: int = 32
    latent_dim: int = 64
    width: int = 256
    layers: int = 6
    heads: int = 4
    dense_connections: int = 2
    dropout: float = 0.1
    self_cond: bool = True
    num_classes: Optional[int] = None
    cross_attention: bool = False
    source_dim: Optional[int] = None
    time_as_token: bool = True
    qk_norm: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if not 0 <= self.dense_connections <= self.layers // 2:
            raise ValueError("dense_connections must be in [0, layers // 2]")
        if self.cross_attention and not self.source_dim:
            raise ValueError("cross_attention requires source_dim")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Conditioning:
    """Optional inputs to the denoiser.

    ``self_cond=None`` means ABSENT (learned placeholder).  ``labels`` may
    contain the null id ``num_classes``.  ``source=None`` means the learned
    null context is attended instead of source features; ``source_drop``
    selects that per sample.
    """

    self_cond: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None
    source: Optional[torch.Tensor] = None
    source_mask: Optional[torch.Tensor] = None
    source_drop: Optional[torch.Tensor] = None

    def replace(self, **kw) -> "Conditioning":
        d = dict(self.__dict__)
        d.update(kw)
        return Conditioning(**d)


class AdaptiveLayerNorm(nn.Module):
    """LayerNorm whose scale and shift are linear in the time embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.to_scale_shift = nn.Linear(dim, 2 * dim)

    def forward(self, x, temb):
        scale, shift = self.to_scale_shift(temb).unsqueeze(1).chunk(2, dim=-1)
        return self.norm(x) * (1 + scale) + shift


class DenoiserBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, fuse_skip: bool):
        super().__init__()
        w = cfg.width
        self.fuse = nn.Linear(2 * w, w) if fuse_skip else None
        self.norm_attn = nn.LayerNorm(w)
        self.attn = Attention(w, cfg.heads, qk_norm=cfg.qk_norm)
        self.cross = None
        if cfg.cross_attention:
            self.norm_cross = nn.LayerNorm(w)
            self.cross = Attention(w, cfg.heads, qk_norm=cfg.qk_norm)
        self.norm_ff = nn.LayerNorm(w)
        self.ff = GEGLU(w, dropout=cfg.dropout)
        self.ada_norm = AdaptiveLayerNorm(w)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, temb, skip=None, context=None, context_mask=None):
        if self.fuse is not None:
            x = self.fuse(torch.cat([x, skip], dim=-1))
        x = x + self.drop(self.attn(self.norm_attn(x)))
        if self.cross is not None:
            x = x + self.drop(self.cross(self.norm_cross(x), context, key_padding_mask=context_mask))
        return x + self.drop(self.ada_norm(self.ff(self.norm_ff(x)), temb))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        in_dim = cfg.latent_dim * (2 if cfg.self_cond else 1)
        self.proj_in = nn.Linear(in_dim, w)
        self.pos = nn.Parameter(torch.randn(cfg.latent_len + int(cfg.time_as_token), w) * 0.02)
        if cfg.self_cond:
            self.absent_self_cond = nn.Parameter(torch.randn(cfg.latent_len, cfg.latent_dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(w, 4 * w), nn.GELU(), nn.Linear(4 * w, w))
        self.label_emb = nn.Embedding(cfg.num_classes + 1, w) if cfg.num_classes else None
        if cfg.cross_attention:
            self.source_proj = nn.Linear(cfg.source_dim, w)
            self.null_source = nn.Parameter(torch.randn(1, cfg.source_dim) * 0.02)
        n_dense = cfg.dense_connections
        self.blocks = nn.ModuleList(
            DenoiserBlock(cfg, fuse_skip=i >= cfg.layers - n_dense) for i in range(cfg.layers))
        self.final_norm = AdaptiveLayerNorm(w)
        self.proj_out = nn.Linear(w, cfg.latent_dim)
        init_weights(self)
        for m in self.modules():
            if isinstance(m, AdaptiveLayerNorm):
                nn.init.zeros_(m.to_scale_shift.weight)
                nn.init.zeros_(m.to_scale_shift.bias)

    @property
    def null_label(self) -> int:
        return self.cfg.num_classes

    def time_embed(self, alpha: torch.Tensor) -> torch.Tensor:
        if bool((alpha < 0).any()) or bool((alpha > 1).any()):
            raise ValueError("alpha must lie in [0, 1]")
        feats = sinusoidal_embedding(alpha * ALPHA_SCALE, self.cfg.width)
        return self.time_mlp(feats.to(self.proj_in.weight.dtype))

    def _context(self, cond: Conditioning, batch: int):
        null = self.null_source.unsqueeze(0).expand(batch, -1, -1)
        if cond.source is None:
            return self.source_proj(null), torch.ones(batch, 1, dtype=torch.bool, device=null.device)
        src, mask = cond.source, cond.source_mask
        if mask is None:
            mask = torch.ones(src.shape[:2], dtype=torch.bool, device=src.device)
        if cond.source_drop is not None and bool(cond.source_drop.any()):
            # dropped samples see only the null embedding at position 0
            drop = cond.source_drop
            first = torch.zeros_like(mask)
            first[:, 0] = True
            src = torch.where(drop[:, None, None] & first[:, :, None],
                              self.null_source.expand_as(src), src)
            mask = torch.where(drop[:, None], first, mask)
        return self.source_proj(src), mask

    def forward(self, z: torch.Tensor, alpha: torch.Tensor, cond: Optional[Conditioning] = None):
        """Return ``(v_hat, x_hat)`` for latents ``z`` of shape (B, l, d)."""
        cond = cond or Conditioning()
        cfg = self.cfg
        B = z.shape[0]
        alpha = torch.as_tensor(alpha, dtype=z.dtype, device=z.device)
        if alpha.ndim == 0:
            alpha = alpha.expand(B)
        if cfg.self_cond:
            sc = cond.self_cond
            if sc is None:
                sc = self.absent_self_cond.unsqueeze(0).expand(B, -1, -1)
            h = self.proj_in(torch.cat([z, sc.to(z.dtype)], dim=-1))
        else:
            h = self.proj_in(z)

        temb = self.time_embed(alpha)
        if self.label_emb is not None:
            if cond.labels is None:
                raise ValueError("class-conditional denoiser requires labels (use the null label id)")
            temb = temb + self.label_emb(cond.labels)

        if cfg.time_as_token:
            h = torch.cat([h, temb.unsqueeze(1)], dim=1)
        else:
            h = h + temb.unsqueeze(1)
        h = h + self.pos

        context = context_mask = None
        if cfg.cross_attention:
            context, context_mask = self._context(cond, B)

        n_dense = cfg.dense_connections
        skips = []
        for i, block in enumerate(self.blocks):
            skip = skips[cfg.layers - 1 - i] if i >= cfg.layers - n_dense else None
            h = block(h, temb, skip=skip, context=context, context_mask=context_mask)
            if i < n_dense:
                skips.append(h)

        if cfg.time_as_token:
            h = h[:, :-1]
        v = self.proj_out(self.final_norm(h, temb))
        if not bool(torch.isfinite(v).all()):
            raise FloatingPointError("non-finite activations in denoiser output")
        return v, x_from_v_at(z, v, alpha)
