"""Ancestral (DDPM) sampling of latents and text realisation."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Callable, Optional, Sequence

import torch

from . import diffusion_math as dm
from .autoencoder import DecodeConfig, LanguageAutoencoder
from .denoiser import Conditioning, Denoiser
from .metrics import rouge

# (z, alpha_t, self_cond or None) -> x_hat
Predictor = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]


@dataclass
class SamplerConfig:
    """``steps`` counts transitions on the grid 1 = t_0 > ... > t_steps = 0."""

    steps: int = 250
    guidance_w: float = 1.0
    rescale_estimates: bool = False
    seed: int = 0
    batch_size: int = 256

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_w < 0:
            raise ValueError("guidance_w must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class SamplingError(FloatingPointError):
    pass


@dataclass
class SampleTrace:
    """Per-step diagnostics: time pairs, noise variances, norms."""

    t: list = field(default_factory=list)
    s: list = field(default_factory=list)
    noise_var: list = field(default_factory=list)
    z_norm: list = field(default_factory=list)
    x_norm: list = field(default_factory=list)

    def to_tsv(self) -> str:
        rows = ["step\tt\ts\tnoise_var\tz_norm\tx_hat_norm"]
        for i, row in enumerate(zip(self.t, self.s, self.noise_var, self.z_norm, self.x_norm)):
            rows.append("\t".join([str(i)] + [f"{v:.6g}" for v in row]))
        return "\n".join(rows) + "\n"


def _mean_row_norm(x: torch.Tensor) -> float:
    return float(torch.linalg.vector_norm(x, dim=-1).mean())


def ddpm_sample(predict: Predictor, shape: Sequence[int], steps: int, *,
                schedule: dm.NoiseSchedule = dm.COSINE, generator: Optional[torch.Generator] = None,
                rescale_estimates: bool = False, dtype=torch.float32,
                trace: Optional[SampleTrace] = None) -> torch.Tensor:
    """Run the ancestral sampler from pure noise down to t = 0.

    The previous (possibly rescaled) estimate is fed back as the
    self-conditioning input; the first step receives None.  The final
    transition returns the posterior mean without noise.
    """
    times = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64).tolist()
    times[-1] = 0.0
    z = torch.randn(tuple(shape), generator=generator, dtype=dtype)
    prev = None
    B = shape[0]
    for i in range(steps):
        t, s = times[i], times[i + 1]
        a_t = float(dm.alpha(schedule, t))
        a_s = float(dm.alpha(schedule, s))
        x_hat = predict(z, torch.full((B,), a_t, dtype=dtype), prev)
        if rescale_estimates:
            x_hat = dm.rescale_latent(x_hat)
        if not bool(torch.isfinite(x_hat).all()):
            raise SamplingError(f"non-finite estimate at sampling step {i} (t={t:.4f})")
        prev = x_hat
        if s == 0.0:
            z = x_hat
            noise_var = 0.0
        else:
            post = dm.posterior_at(x_hat, z, a_s, a_t)
            noise_var = 1.0 - a_t / a_s
            noise = torch.randn(z.shape, generator=generator, dtype=dtype)
            z = post.mean + noise_var ** 0.5 * noise
        if not bool(torch.isfinite(z).all()):
            raise SamplingError(f"non-finite latent at sampling step {i} (t={t:.4f})")
        if trace is not None:
            trace.t.append(t)
            trace.s.append(s)
            trace.noise_var.append(noise_var)
            trace.z_norm.append(_mean_row_norm(z))
            trace.x_norm.append(_mean_row_norm(x_hat))
    return z


def _unconditional(cond: Conditioning, model: Denoiser) -> Conditioning:
    labels = None
    if cond.labels is not None:
        labels = torch.full_like(cond.labels, model.null_label)
    return cond.replace(labels=labels, source=None, source_mask=None, source_drop=None)


def is_conditional(cond: Conditioning) -> bool:
    return cond.labels is not None or cond.source is not None


@torch.no_grad()
def cfg_predict(model: Denoiser, z: torch.Tensor, alpha_t: torch.Tensor, cond: Conditioning,
                w: float) -> torch.Tensor:
    """``w * x_hat(cond) + (1 - w) * x_hat(uncond)``; skips the unused branch at w in {0, 1}."""
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    if w == 1.0 or not is_conditional(cond):
        return model(z, alpha_t, cond)[1]
    uncond = _unconditional(cond, model)
    if w == 0.0:
        return model(z, alpha_t, uncond)[1]
    x_c = model(z, alpha_t, cond)[1]
    x_u = model(z, alpha_t, uncond)[1]
    return w * x_c + (1.0 - w) * x_u


def model_predictor(model: Denoiser, cond: Conditioning, w: float) -> Predictor:
    def predict(z, alpha_t, prev):
        return cfg_predict(model, z, alpha_t, cond.replace(self_cond=prev), w)
    return predict


@torch.no_grad()
def sample_latents(model: Denoiser, n: int, config: SamplerConfig, cond: Optional[Conditioning] = None,
                   schedule: dm.NoiseSchedule = dm.COSINE, generator: Optional[torch.Generator] = None,
                   trace: Optional[SampleTrace] = None) -> torch.Tensor:
    """Sample ``n`` latents in batches; per-sample conditioning is sliced per batch."""
    model.eval()
    cond = cond or Conditioning()
    generator = generator or torch.Generator().manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    shape = (model.cfg.latent_len, model.cfg.latent_dim)
    out = []
    for lo in range(0, n, config.batch_size):
        hi = min(n, lo + config.batch_size)
        sub = Conditioning(
            labels=None if cond.labels is None else cond.labels[lo:hi],
            source=None if cond.source is None else cond.source[lo:hi],
            source_mask=None if cond.source_mask is None else cond.source_mask[lo:hi])
        out.append(ddpm_sample(model_predictor(model, sub, config.guidance_w), (hi - lo, *shape),
                               config.steps, schedule=schedule, generator=generator,
                               rescale_estimates=config.rescale_estimates, dtype=dtype,
                               trace=trace if lo == 0 else None))
    return torch.cat(out)


@dataclass
class CandidateSet:
    """Decoded candidates (token lists) and the latents they came from."""

    sequences: list[list[str]]
    latents: torch.Tensor

    def __len__(self):
        return len(self.sequences)


@torch.no_grad()
def generate_text(ae: LanguageAutoencoder, model: Denoiser, vocab, n: int, sampler_config: SamplerConfig,
                  decode_config: DecodeConfig = DecodeConfig(), cond: Optional[Conditioning] = None,
                  schedule: dm.NoiseSchedule = dm.COSINE, generator: Optional[torch.Generator] = None,
                  trace: Optional[SampleTrace] = None) -> CandidateSet:
    ae.eval()
    latents = sample_latents(model, n, sampler_config, cond, schedule, generator, trace)
    sequences = []
    for lo in range(0, n, sampler_config.batch_size):
        feats = ae.reconstruct_features(latents[lo:lo + sampler_config.batch_size].to(
            next(ae.parameters()).dtype))
        sequences.extend(vocab.decode(ids) for ids in ae.decode(feats, decode_config))
    return CandidateSet(sequences, latents)


def repeat_conditioning(cond: Conditioning, k: int) -> Conditioning:
    """Repeat every per-sample conditioning tensor ``k`` times (interleaved)."""
    def rep(x):
        return None if x is None else x.repeat_interleave(k, dim=0)
    return Conditioning(labels=rep(cond.labels), source=rep(cond.source), source_mask=rep(cond.source_mask))


# --------------------------------------------------------------------------
# candidate selection


def neg_rouge_l(a: Sequence[str], b: Sequence[str]) -> float:
    return -rouge(a, b)[2]


def mbr_scores(candidates: Sequence[Sequence[str]], loss=neg_rouge_l) -> list[float]:
    n = len(candidates)
    return [sum(loss(c, other) for other in candidates) / n for c in candidates]


def mbr_index(candidates: Sequence[Sequence[str]], loss=neg_rouge_l) -> int:
    if not candidates:
        raise ValueError("MBR selection needs at least one candidate")
    scores = mbr_scores(candidates, loss)
    return min(range(len(scores)), key=lambda i: (scores[i], i))


def mbr_select(candidates: Sequence[Sequence[str]], loss=neg_rouge_l) -> Sequence[str]:
    """Candidate with the lowest mean loss against the whole set (ties: lowest index)."""
    return candidates[mbr_index(candidates, loss)]


def oracle_index(candidates: Sequence[Sequence[str]], reference: Sequence[str], loss=neg_rouge_l) -> int:
    if not candidates:
        raise ValueError("oracle selection needs at least one candidate")
    scores = [loss(c, reference) for c in candidates]
    return min(range(len(scores)), key=lambda i: (scores[i], i))


def oracle_select(candidates: Sequence[Sequence[str]], reference: Sequence[str], loss=neg_rouge_l) -> Sequence[str]:
    return candidates[oracle_index(candidates, reference, loss)]
