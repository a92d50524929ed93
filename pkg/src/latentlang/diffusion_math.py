"""Closed-form quantities of the continuous-time Gaussian diffusion process.

Conventions: ``alpha`` is the *signal variance* of the forward marginal, so
``z_t = sqrt(alpha_t) * x + sqrt(1 - alpha_t) * eps``.  Times live in [0, 1]
with ``t = 0`` clean data and ``t = 1`` pure noise.

Everything here is a pure function of its inputs.  Callers supply noise
explicitly; nothing in this module draws random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch

Number = Union[float, torch.Tensor]

EPS_NUM = 1e-12

SCHEDULE_KINDS = ("cosine", "shifted-cosine")


class DegenerateLatentError(ValueError):
    """A latent position vector has zero norm and cannot be rescaled."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"
    shift_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.shift_scale > 0:
            raise ValueError(f"shift_scale must be positive, got {self.shift_scale}")

    def alpha(self, t: Number) -> Number:
        return alpha(self, t)


COSINE = NoiseSchedule()


def _check_t(t: Number) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (bool((t < 0).any()) or bool((t > 1).any()) or bool(torch.isnan(t).any())):
            raise ValueError("t must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")


def _cosine(t: Number) -> Number:
    if isinstance(t, torch.Tensor):
        return torch.cos(0.5 * math.pi * t) ** 2
    return math.cos(0.5 * math.pi * t) ** 2


def alpha(schedule: NoiseSchedule, t: Number) -> Number:
    """Signal variance at time ``t``.

    The shifted cosine multiplies the base signal-to-noise ratio
    ``a / (1 - a)`` by ``s**2`` and maps back through a sigmoid.  The base
    value is clamped to ``[EPS_NUM, 1 - EPS_NUM]`` before taking logs; the
    exact endpoint limits 1 and 0 are returned at ``t = 0`` and ``t = 1``.
    """
    _check_t(t)
    base = _cosine(t)
    if schedule.kind == "cosine" or schedule.shift_scale == 1.0:
        return base
    log_shift = 2.0 * math.log(schedule.shift_scale)
    if isinstance(t, torch.Tensor):
        a = base.clamp(EPS_NUM, 1.0 - EPS_NUM)
        shifted = torch.sigmoid(torch.log(a) - torch.log1p(-a) + log_shift)
        shifted = torch.where(t == 0, torch.ones_like(shifted), shifted)
        return torch.where(t == 1, torch.zeros_like(shifted), shifted)
    if t == 0.0:
        return 1.0
    if t == 1.0:
        return 0.0
    a = min(max(base, EPS_NUM), 1.0 - EPS_NUM)
    logit = math.log(a) - math.log1p(-a) + log_shift
    return 1.0 / (1.0 + math.exp(-logit))


def log_snr(schedule: NoiseSchedule, t: Number) -> Number:
    """``log(alpha / (1 - alpha))``, clamped away from the endpoints."""
    a = alpha(schedule, t)
    if isinstance(a, torch.Tensor):
        a = a.clamp(EPS_NUM, 1.0 - EPS_NUM)
        return torch.log(a) - torch.log1p(-a)
    a = min(max(a, EPS_NUM), 1.0 - EPS_NUM)
    return math.log(a) - math.log1p(-a)


def _broadcast(a: Number, like: torch.Tensor) -> Number:
    # per-sample alphas of shape (B,) broadcast over trailing latent dims
    if isinstance(a, torch.Tensor):
        a = a.to(like.dtype)
        if a.ndim and a.ndim < like.ndim:
            a = a.reshape(a.shape + (1,) * (like.ndim - a.ndim))
    return a


def _sqrt(a: Number) -> Number:
    return torch.sqrt(a) if isinstance(a, torch.Tensor) else math.sqrt(a)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# parameterisations, expressed directly in terms of alpha


def forward_sample_at(x: torch.Tensor, eps: torch.Tensor, a: Number) -> torch.Tensor:
    _same_shape(x, eps, "forward_sample")
    a = _broadcast(a, x)
    return _sqrt(a) * x + _sqrt(1 - a) * eps


def v_at(x: torch.Tensor, eps: torch.Tensor, a: Number) -> torch.Tensor:
    _same_shape(x, eps, "v_from")
    a = _broadcast(a, x)
    return _sqrt(a) * eps - _sqrt(1 - a) * x


def x_from_v_at(z: torch.Tensor, v: torch.Tensor, a: Number) -> torch.Tensor:
    _same_shape(z, v, "x_from_v")
    a = _broadcast(a, z)
    return _sqrt(a) * z - _sqrt(1 - a) * v


def eps_from_v_at(z: torch.Tensor, v: torch.Tensor, a: Number) -> torch.Tensor:
    _same_shape(z, v, "eps_from_v")
    a = _broadcast(a, z)
    return _sqrt(1 - a) * z + _sqrt(a) * v


# the same, addressed by time


def forward_sample(x: torch.Tensor, t: Number, eps: torch.Tensor,
                   schedule: NoiseSchedule = COSINE) -> torch.Tensor:
    return forward_sample_at(x, eps, alpha(schedule, t))


def v_from(x: torch.Tensor, eps: torch.Tensor, t: Number,
           schedule: NoiseSchedule = COSINE) -> torch.Tensor:
    return v_at(x, eps, alpha(schedule, t))


def x_from_v(z: torch.Tensor, v: torch.Tensor, t: Number,
             schedule: NoiseSchedule = COSINE) -> torch.Tensor:
    return x_from_v_at(z, v, alpha(schedule, t))


def eps_from_v(z: torch.Tensor, v: torch.Tensor, t: Number,
               schedule: NoiseSchedule = COSINE) -> torch.Tensor:
    return eps_from_v_at(z, v, alpha(schedule, t))


@dataclass
class PosteriorStats:
    """Mean and (isotropic) variance of q(z_s | z_t, x)."""

    mean: torch.Tensor
    variance: float


def posterior_coefficients(alpha_s: float, alpha_t: float) -> tuple[float, float, float]:
    """Return ``(coef_x, coef_z, variance)`` of q(z_s | z_t, x)."""
    if not alpha_s > alpha_t:
        raise ValueError("posterior requires alpha_s > alpha_t (s < t)")
    if alpha_t >= 1.0:
        raise ValueError("posterior undefined at t = 0")
    a_ts = alpha_t / alpha_s
    denom = 1.0 - alpha_t
    coef_x = math.sqrt(alpha_s) * (1.0 - a_ts) / denom
    coef_z = math.sqrt(a_ts) * (1.0 - alpha_s) / denom
    variance = (1.0 - alpha_s) * (1.0 - a_ts) / denom
    return coef_x, coef_z, max(variance, 0.0)


def posterior_at(x: torch.Tensor, z_t: torch.Tensor, alpha_s: float, alpha_t: float) -> PosteriorStats:
    _same_shape(x, z_t, "posterior")
    coef_x, coef_z, variance = posterior_coefficients(alpha_s, alpha_t)
    if alpha_s == 1.0:
        return PosteriorStats(mean=x.clone(), variance=0.0)
    return PosteriorStats(mean=coef_x * x + coef_z * z_t, variance=variance)


def posterior(x: torch.Tensor, z_t: torch.Tensor, s: float, t: float,
              schedule: NoiseSchedule = COSINE) -> PosteriorStats:
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"posterior requires 0 <= s < t <= 1, got s={s}, t={t}")
    return posterior_at(x, z_t, float(alpha(schedule, s)), float(alpha(schedule, t)))


def generative_variance(s: float, t: float, schedule: NoiseSchedule = COSINE) -> float:
    """Ancestral-sampler variance ``1 - alpha_t / alpha_s``."""
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"requires 0 <= s < t <= 1, got s={s}, t={t}")
    return 1.0 - float(alpha(schedule, t)) / float(alpha(schedule, s))


def rescale_latent(x: torch.Tensor, d_ae: int | None = None) -> torch.Tensor:
    """Scale every position vector (last axis) to squared norm ``d_ae``."""
    if d_ae is None:
        d_ae = x.shape[-1]
    if d_ae <= 0:
        raise ValueError("d_ae must be positive")
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateLatentError("cannot rescale a zero-norm latent position vector")
    return x * (math.sqrt(d_ae) / norm)
