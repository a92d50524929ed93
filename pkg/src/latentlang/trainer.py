"""Training loops for the autoencoder and the latent denoiser."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Iterator, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffusion_math as dm
from .autoencoder import LanguageAutoencoder
from .data import Example, pad_batch
from .denoiser import Conditioning, Denoiser

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_steps: int = 1000
    decay: str = "cosine"
    weight_decay: float = 1e-6
    grad_clip: float = 1.0
    batch_size: int = 128
    steps: int = 250_000
    ema_decay: float = 0.9999
    self_cond_p: float = 0.5
    cond_drop_p: float = 0.1
    loss: str = "l2"
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    log_every: int = 100
    save_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("self_cond_p", "cond_drop_p", "ema_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not self.lr > 0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("lr, steps and batch_size must be positive")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.warmup_steps < 0 or self.save_every < 0:
            raise ValueError("warmup_steps and save_every must be non-negative")
        if self.decay not in ("cosine", "linear"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class TrainingDivergedError(FloatingPointError):
    pass


def _maybe_save(config: TrainConfig, step: int, on_save) -> None:
    if on_save is not None and config.save_every and step % config.save_every == 0:
        on_save(step)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` then cosine/linear decay to 0 at ``config.steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.steps - config.warmup_steps
    if span <= 0:
        return config.lr if step < config.steps else 0.0
    frac = min(1.0, (step - config.warmup_steps) / span)
    if config.decay == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return config.lr * (1.0 - frac)


class EMA:
    """Exponential moving average of a module's floating-point state."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            s = self.shadow[k]
            if s.is_floating_point():
                s.mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)
            else:
                s.copy_(v)

    def copy_to(self, model: nn.Module) -> None:
        model.load_state_dict(self.shadow)


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=0.0, betas=config.betas, weight_decay=config.weight_decay)


def _clip(model: nn.Module, max_norm: float) -> float:
    params = [p for p in model.parameters() if p.grad is not None]
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


class ScalarLog:
    """Tab-separated ``step loss lr grad_norm`` lines."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step\tloss\tlr\tgrad_norm\n")

    def write(self, step, loss, lr, grad_norm):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(f"{step}\t{loss:.6g}\t{lr:.6g}\t{grad_norm:.6g}\n")


# --------------------------------------------------------------------------
# autoencoder


class AutoencoderTrainer:
    def __init__(self, model: LanguageAutoencoder, config: TrainConfig, log_path: Optional[Path] = None):
        self.model = model
        self.config = config
        self.optimizer = make_optimizer(model, config)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step_count = 0
        self.last_grad_norm = 0.0
        self.scalars = ScalarLog(log_path)

    def step(self, ids: torch.Tensor, mask: Optional[torch.Tensor] = None) -> float:
        """One optimisation step on a padded batch of token ids."""
        model, cfg = self.model, self.config
        model.train()
        lr = lr_at(self.step_count, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        loss = model.loss(ids, mask)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite autoencoder loss at step {self.step_count}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.last_grad_norm = _clip(model, cfg.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        value = float(loss.detach())
        if self.step_count % cfg.log_every == 0:
            self.scalars.write(self.step_count, value, lr, self.last_grad_norm)
        return value

    def batches(self, examples: list[Example]) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Endless seeded shuffled batches."""
        n = len(examples)
        bs = min(self.config.batch_size, n)
        while True:
            order = torch.randperm(n, generator=self.generator).tolist()
            for i in range(0, n - bs + 1, bs):
                yield pad_batch([examples[j].ids for j in order[i:i + bs]])

    def fit(self, examples: list[Example], steps: Optional[int] = None,
            on_save: Optional[Callable[[int], None]] = None) -> list[float]:
        """Run ``steps`` updates; ``on_save(step)`` fires every ``save_every`` steps."""
        steps = self.config.steps if steps is None else steps
        losses = []
        it = self.batches(examples)
        for _ in range(steps):
            losses.append(self.step(*next(it)))
            if self.step_count % self.config.log_every == 0:
                log.info("ae step %d loss %.4f", self.step_count, losses[-1])
            _maybe_save(self.config, self.step_count, on_save)
        return losses


# --------------------------------------------------------------------------
# diffusion


@dataclass
class LatentBatch:
    latents: torch.Tensor
    labels: Optional[torch.Tensor] = None
    source: Optional[torch.Tensor] = None
    source_mask: Optional[torch.Tensor] = None


class LatentDataset:
    """Cached autoencoder latents (and optional labels / source features)."""

    def __init__(self, latents, labels=None, source=None, source_mask=None):
        self.latents = latents
        self.labels = labels
        self.source = source
        self.source_mask = source_mask

    def __len__(self):
        return self.latents.shape[0]

    def batch(self, idx: torch.Tensor) -> LatentBatch:
        return LatentBatch(
            self.latents[idx],
            None if self.labels is None else self.labels[idx],
            None if self.source is None else self.source[idx],
            None if self.source_mask is None else self.source_mask[idx])

    @classmethod
    @torch.no_grad()
    def from_examples(cls, ae: LanguageAutoencoder, examples: list[Example], batch_size: int = 256):
        ae.eval()
        lat, src, src_mask = [], [], []
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            ids, mask = pad_batch([e.ids for e in chunk])
            lat.append(ae.latent(ids, mask))
            if chunk[0].source_ids is not None:
                sids, smask = pad_batch([e.source_ids for e in chunk])
                src.append((ae.encode(sids, smask), smask))
        labels = None
        if examples[0].label is not None:
            labels = torch.tensor([e.label for e in examples], dtype=torch.long)
        source = source_mask = None
        if src:
            width = max(s.shape[1] for s, _ in src)
            source = torch.cat([F.pad(s, (0, 0, 0, width - s.shape[1])) for s, _ in src])
            source_mask = torch.cat([F.pad(m, (0, width - m.shape[1])) for _, m in src])
        return cls(torch.cat(lat), labels, source, source_mask)


class DiffusionTrainer:
    """Owns the denoiser, its optimiser, the EMA shadow and the RNG stream."""

    def __init__(self, model: Denoiser, config: TrainConfig, schedule: dm.NoiseSchedule = dm.COSINE,
                 log_path: Optional[Path] = None):
        self.model = model
        self.config = config
        self.schedule = schedule
        self.optimizer = make_optimizer(model, config)
        self.ema = EMA(model, config.ema_decay)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step_count = 0
        self.last_grad_norm = 0.0
        self.scalars = ScalarLog(log_path)

    def _rand(self, *shape, like):
        return torch.rand(*shape, generator=self.generator, dtype=like.dtype)

    def step(self, batch: LatentBatch) -> float:
        model, cfg = self.model, self.config
        model.train()
        x = batch.latents
        B = x.shape[0]
        t = self._rand(B, like=x)
        eps = torch.randn(x.shape, generator=self.generator, dtype=x.dtype)
        a = dm.alpha(self.schedule, t)
        z = dm.forward_sample_at(x, eps, a)
        target = dm.v_at(x, eps, a)

        cond = Conditioning()
        if batch.labels is not None:
            drop = self._rand(B, like=x) < cfg.cond_drop_p
            cond.labels = torch.where(drop, torch.full_like(batch.labels, model.null_label), batch.labels)
        if batch.source is not None:
            cond.source, cond.source_mask = batch.source, batch.source_mask
            cond.source_drop = self._rand(B, like=x) < cfg.cond_drop_p

        use_self_cond = model.cfg.self_cond and float(self._rand(1, like=x)) < cfg.self_cond_p
        if use_self_cond:
            with torch.no_grad():
                _, x_first = model(z, a, cond)
            cond = cond.replace(self_cond=x_first.detach())
        v_hat, _ = model(z, a, cond)

        if cfg.loss == "l1":
            loss = F.l1_loss(v_hat, target)
        else:
            loss = F.mse_loss(v_hat, target)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite diffusion loss at step {self.step_count}: t in "
                f"[{float(t.min()):.4f}, {float(t.max()):.4f}], last grad norm {self.last_grad_norm:.4g}")
        lr = lr_at(self.step_count, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.last_grad_norm = _clip(model, cfg.grad_clip)
        self.optimizer.step()
        self.ema.update(model)
        self.step_count += 1
        value = float(loss.detach())
        if self.step_count % cfg.log_every == 0:
            self.scalars.write(self.step_count, value, lr, self.last_grad_norm)
        return value

    def batches(self, data: LatentDataset) -> Iterator[LatentBatch]:
        n = len(data)
        bs = min(self.config.batch_size, n)
        while True:
            order = torch.randperm(n, generator=self.generator)
            for i in range(0, n - bs + 1, bs):
                yield data.batch(order[i:i + bs])

    def fit(self, data: LatentDataset, steps: Optional[int] = None,
            on_save: Optional[Callable[[int], None]] = None) -> list[float]:
        steps = self.config.steps if steps is None else steps
        losses = []
        it = self.batches(data)
        for _ in range(steps):
            losses.append(self.step(next(it)))
            if self.step_count % self.config.log_every == 0:
                log.info("diffusion step %d loss %.4f", self.step_count, losses[-1])
            _maybe_save(self.config, self.step_count, on_save)
        return losses

    def ema_model(self) -> Denoiser:
        """A copy of the denoiser carrying the EMA weights, in eval mode."""
        clone = Denoiser(self.model.cfg).to(next(self.model.parameters()).dtype)
        self.ema.copy_to(clone)
        return clone.eval()


def fit_on_the_fly(trainer: DiffusionTrainer, ae: LanguageAutoencoder, examples: list[Example],
                   steps: int) -> list[float]:
    """Train while encoding each batch with the (frozen) autoencoder."""
    ae.eval()
    losses = []
    n = len(examples)
    bs = min(trainer.config.batch_size, n)
    while len(losses) < steps:
        order = torch.randperm(n, generator=trainer.generator).tolist()
        for i in range(0, n - bs + 1, bs):
            if len(losses) >= steps:
                break
            chunk = [examples[j] for j in order[i:i + bs]]
            losses.append(trainer.step(LatentDataset.from_examples(ae, chunk, bs).batch(torch.arange(len(chunk)))))
    return losses
