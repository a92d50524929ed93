"""Language autoencoder mapping token sequences to a fixed-size latent.

encoder -> compression (learned queries attending to [queries; features])
-> down-projection (+ optional norm constraint) -> up-projection +
positions -> reconstruction transformer -> autoregressive decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Vocabulary
from .diffusion_math import rescale_latent
from .layers import Attention, FeedForward, TransformerLayer, init_weights


@dataclass
class AutoencoderConfig:
    vocab_size: int = 4096
    max_len: int = 64
    d_model: int = 256
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    compress_layers: int = 3
    reconstruct_layers: int = 3
    latent_len: int = 32
    latent_dim: int = 64
    normalize_latent: bool = True
    qk_norm: bool = True
    dropout: float = 0.0
    freeze_lm: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if min(self.latent_len, self.latent_dim, self.max_len) < 1:
            raise ValueError("latent and sequence sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DecodeConfig:
    beam: int = 4
    rep_penalty: float = 1.2
    no_repeat_ngram: int = 3
    max_len: Optional[int] = None
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be positive")
        if self.rep_penalty <= 0:
            raise ValueError("rep_penalty must be positive")


class TextEncoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_len, cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.heads, qk_norm=cfg.qk_norm, dropout=cfg.dropout)
            for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, ids, mask):
        pos = torch.arange(ids.shape[1], device=ids.device)
        h = self.tok(ids) + self.pos(pos)
        for layer in self.layers:
            h = layer(h, mask=mask)
        return self.norm(h)


class PerceiverLayer(nn.Module):
    def __init__(self, dim, heads, qk_norm, dropout):
        super().__init__()
        self.norm_latent = nn.LayerNorm(dim)
        self.norm_context = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, qk_norm=qk_norm)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dropout=dropout)

    def forward(self, latents, context, context_mask):
        q = self.norm_latent(latents)
        kv = torch.cat([q, self.norm_context(context)], dim=1)
        kv_mask = torch.cat([torch.ones(q.shape[:2], dtype=torch.bool, device=q.device), context_mask], dim=1)
        latents = latents + self.attn(q, kv, key_padding_mask=kv_mask)
        return latents + self.ff(self.norm_ff(latents))


class Compressor(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(cfg.latent_len, cfg.d_model) * 0.02)
        self.layers = nn.ModuleList(
            PerceiverLayer(cfg.d_model, cfg.heads, cfg.qk_norm, cfg.dropout)
            for _ in range(cfg.compress_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.down = nn.Linear(cfg.d_model, cfg.latent_dim)
        self.normalize = cfg.normalize_latent

    def forward(self, feats, mask):
        z = self.queries.unsqueeze(0).expand(feats.shape[0], -1, -1)
        for layer in self.layers:
            z = layer(z, feats, mask)
        x = self.down(self.norm(z))
        return rescale_latent(x) if self.normalize else x


class Reconstructor(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.up = nn.Linear(cfg.latent_dim, cfg.d_model)
        self.pos = nn.Parameter(torch.randn(cfg.latent_len, cfg.d_model) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.heads, qk_norm=cfg.qk_norm, dropout=cfg.dropout)
            for _ in range(cfg.reconstruct_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x):
        h = self.up(x) + self.pos
        for layer in self.layers:
            h = layer(h)
        return self.norm(h)


class TextDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_len, cfg.d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(cfg.d_model, cfg.heads, cross_dim=cfg.d_model, causal=True,
                             qk_norm=cfg.qk_norm, dropout=cfg.dropout)
            for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, ids, feats, mask=None):
        pos = torch.arange(ids.shape[1], device=ids.device)
        h = self.tok(ids) + self.pos(pos)
        for layer in self.layers:
            h = layer(h, mask=mask, context=feats)
        return self.out(self.norm(h))


class LanguageAutoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = TextEncoder(cfg)
        self.compressor = Compressor(cfg)
        self.reconstructor = Reconstructor(cfg)
        self.decoder = TextDecoder(cfg)
        init_weights(self)
        if cfg.freeze_lm:
            for p in [*self.encoder.parameters(), *self.decoder.parameters()]:
                p.requires_grad_(False)

    def _check_len(self, ids):
        if ids.shape[-1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {self.cfg.max_len}")

    def encode(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, L) ids -> (B, L, d_model) features."""
        self._check_len(ids)
        if mask is None:
            mask = ids != Vocabulary.PAD
        return self.encoder(ids, mask)

    def compress(self, feats: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, L, d_model) features -> (B, latent_len, latent_dim) latent."""
        if mask is None:
            mask = torch.ones(feats.shape[:2], dtype=torch.bool, device=feats.device)
        return self.compressor(feats, mask)

    def latent(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = ids != Vocabulary.PAD
        return self.compress(self.encode(ids, mask), mask)

    def reconstruct_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstructor(x)

    def logits(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Teacher-forced next-token logits for ``ids[:, :-1]``."""
        if mask is None:
            mask = ids != Vocabulary.PAD
        feats = self.reconstruct_features(self.latent(ids, mask))
        return self.decoder(ids[:, :-1], feats, mask[:, :-1])

    def loss(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Mean token cross-entropy of the reconstruction, PAD targets masked."""
        if mask is None:
            mask = ids != Vocabulary.PAD
        targets = ids[:, 1:]
        if not bool(mask[:, 1:].any()):
            raise ValueError("ae_loss: batch contains no non-PAD target tokens")
        logits = self.logits(ids, mask)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                               ignore_index=Vocabulary.PAD)

    @torch.no_grad()
    def decode(self, feats: torch.Tensor, config: DecodeConfig = DecodeConfig()) -> list[list[int]]:
        """Decode reconstruction features to id lists (BOS ... EOS)."""
        max_len = min(config.max_len or self.cfg.max_len, self.cfg.max_len)
        if config.beam == 1:
            return greedy_search(self.decoder, feats, max_len, config)
        return beam_search(self.decoder, feats, max_len, config)

    @torch.no_grad()
    def reconstruct(self, ids: torch.Tensor, config: DecodeConfig = DecodeConfig(beam=1, rep_penalty=1.0,
                                                                               no_repeat_ngram=0)):
        return self.decode(self.reconstruct_features(self.latent(ids)), config)


# --------------------------------------------------------------------------
# decoding


def banned_ngram_mask(tokens: torch.Tensor, n: int, vocab_size: int) -> torch.Tensor:
    """(N, t) prefixes -> (N, V) mask of tokens that would repeat an n-gram."""
    N, t = tokens.shape
    banned = torch.zeros(N, vocab_size, dtype=torch.bool, device=tokens.device)
    if n <= 0 or t < n:
        return banned
    windows = tokens.unfold(1, n, 1)  # (N, t - n + 1, n)
    suffix = tokens[:, t - n + 1:]  # the n-1 most recent tokens
    match = (windows[:, :, :-1] == suffix[:, None, :]).all(-1)
    hits = torch.zeros(N, vocab_size, dtype=torch.long, device=tokens.device)
    hits.scatter_add_(1, windows[:, :, -1], match.long())
    return hits > 0


def _penalise(logp: torch.Tensor, tokens: torch.Tensor, config: DecodeConfig) -> torch.Tensor:
    if config.rep_penalty != 1.0:
        seen = torch.zeros_like(logp, dtype=torch.bool)
        seen.scatter_(1, tokens, True)
        logp = torch.where(seen, torch.where(logp < 0, logp * config.rep_penalty,
                                             logp / config.rep_penalty), logp)
    if config.no_repeat_ngram > 0:
        logp = logp.masked_fill(banned_ngram_mask(tokens, config.no_repeat_ngram, logp.shape[-1]),
                                float("-inf"))
    return logp


def _step_logp(decoder, tokens, feats):
    """Next-token log-probabilities; PAD and BOS are never generated."""
    logits = decoder(tokens, feats)[:, -1].float()
    logits[:, Vocabulary.PAD] = float("-inf")
    logits[:, Vocabulary.BOS] = float("-inf")
    return F.log_softmax(logits, dim=-1)


def greedy_search(decoder, feats, max_len: int, config: DecodeConfig) -> list[list[int]]:
    B = feats.shape[0]
    tokens = torch.full((B, 1), Vocabulary.BOS, dtype=torch.long, device=feats.device)
    done = torch.zeros(B, dtype=torch.bool, device=feats.device)
    while tokens.shape[1] < max_len and not bool(done.all()):
        logp = _penalise(_step_logp(decoder, tokens, feats), tokens, config)
        nxt = logp.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, Vocabulary.PAD), nxt)
        tokens = torch.cat([tokens, nxt[:, None]], dim=1)
        done |= nxt == Vocabulary.EOS
    return [_trim(row) for row in tokens.tolist()]


def _trim(row: list[int]) -> list[int]:
    out = []
    for tok in row:
        if tok == Vocabulary.PAD:
            break
        out.append(tok)
        if tok == Vocabulary.EOS:
            break
    return out


def beam_search(decoder, feats, max_len: int, config: DecodeConfig) -> list[list[int]]:
    """Batched beam search with length-normalised finished hypotheses.

    Candidates are ranked with a stable sort so equal scores keep expansion
    order (beam index, then token id).
    """
    B, K = feats.shape[0], config.beam
    device = feats.device
    feats_k = feats.repeat_interleave(K, dim=0)
    tokens = torch.full((B * K, 1), Vocabulary.BOS, dtype=torch.long, device=device)
    live = torch.full((B, K), float("-inf"), device=device)
    live[:, 0] = 0.0
    fin_scores = torch.full((B, K), float("-inf"), device=device)
    fin_tokens = torch.full((B, K, max_len), Vocabulary.PAD, dtype=torch.long, device=device)
    done = torch.zeros(B, dtype=torch.bool, device=device)

    def norm(scores, length):
        return scores / (length ** config.length_penalty)

    def add_finished(cand_scores, cand_tokens):
        # cand_scores (B, M) normalised, -inf for non-candidates; cand_tokens (B, M, t)
        nonlocal fin_scores, fin_tokens
        t = cand_tokens.shape[-1]
        padded = torch.full(cand_tokens.shape[:2] + (max_len,), Vocabulary.PAD, dtype=torch.long, device=device)
        padded[:, :, :t] = cand_tokens
        all_scores = torch.cat([fin_scores, cand_scores], dim=1)
        all_tokens = torch.cat([fin_tokens, padded], dim=1)
        order = torch.sort(all_scores, dim=1, descending=True, stable=True).indices[:, :K]
        fin_scores = all_scores.gather(1, order)
        fin_tokens = all_tokens.gather(1, order[:, :, None].expand(-1, -1, max_len))

    while tokens.shape[1] < max_len:
        t = tokens.shape[1]
        logp = _penalise(_step_logp(decoder, tokens, feats_k), tokens, config)
        V = logp.shape[-1]
        cand = (live.reshape(-1, 1) + logp).reshape(B, K * V)
        top = torch.sort(cand, dim=1, descending=True, stable=True)
        top_scores, top_idx = top.values[:, :2 * K], top.indices[:, :2 * K]
        beam_idx, tok_idx = top_idx // V, top_idx % V
        prev = tokens.view(B, K, t).gather(1, beam_idx[:, :, None].expand(-1, -1, t))
        new_tokens = torch.cat([prev, tok_idx[:, :, None]], dim=-1)  # (B, 2K, t+1)

        is_eos = tok_idx == Vocabulary.EOS
        rank = torch.arange(2 * K, device=device).expand(B, -1)
        eligible = is_eos & (rank < K) & torch.isfinite(top_scores) & ~done[:, None]
        add_finished(torch.where(eligible, norm(top_scores, t), torch.full_like(top_scores, float("-inf"))),
                     new_tokens)

        # keep the K best non-EOS continuations as live beams
        keep_key = torch.where(is_eos, torch.full_like(top_scores, float("-inf")), top_scores)
        keep = torch.sort(keep_key, dim=1, descending=True, stable=True).indices[:, :K]
        live = keep_key.gather(1, keep)
        tokens = new_tokens.gather(1, keep[:, :, None].expand(-1, -1, t + 1)).reshape(B * K, t + 1)

        best_live = norm(live.max(dim=1).values, t)
        full = torch.isfinite(fin_scores).all(dim=1)
        done |= full & (best_live <= fin_scores[:, -1])
        done |= ~torch.isfinite(live).any(dim=1)
        if bool(done.all()):
            break

    # unfinished batch entries: live beams compete with finished ones at max_len
    leftover = torch.where(done[:, None], torch.full_like(live, float("-inf")), norm(live, tokens.shape[1] - 1))
    add_finished(leftover, tokens.view(B, K, -1))
    best = fin_tokens[:, 0].tolist()
    return [_trim(row) for row in best]
