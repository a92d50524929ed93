"""End-to-end stages: corpus -> autoencoder -> denoiser -> samples -> metrics.

Every stage takes an effective :class:`RunConfig` and returns plain objects
plus the checkpoint it wrote, so the CLI and tests share one code path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import config as config_mod
from .autoencoder import AutoencoderConfig, LanguageAutoencoder
from .checkpoint import Checkpoint, CheckpointError, prefixed, save_checkpoint
from .config import RunConfig
from .data import Corpus, Example, Vocabulary, ingest, pad_batch, tokenize
from .denoiser import Conditioning, Denoiser, DenoiserConfig
from .metrics import NgramIndex, report, rouge
from .sampler import SampleTrace, generate_text, mbr_index, repeat_conditioning
from .trainer import AutoencoderTrainer, DiffusionTrainer, LatentDataset

log = logging.getLogger(__name__)


def set_determinism(seed: int, threads: Optional[int] = 1) -> None:
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def load_corpus(cfg: RunConfig, vocab: Optional[Vocabulary] = None, path: Optional[str] = None) -> Corpus:
    path = path or cfg.data.corpus
    if not path:
        raise config_mod.ConfigError("data.corpus is not set")
    d = cfg.data
    return ingest(path, cfg.mode, max_len=d.max_len, valid_frac=d.valid_frac, test_frac=d.test_frac,
                  seed=cfg.seed, max_vocab=d.max_vocab, vocab=vocab)


def _ae_texts(corpus: Corpus) -> list[Example]:
    """Autoencoder training sequences: targets, plus sources in seq2seq mode."""
    out = list(corpus.train)
    if corpus.mode == "seq2seq":
        out += [Example(text=e.source, ids=e.source_ids) for e in corpus.train]
    return out


@torch.no_grad()
def reconstruction_accuracy(ae: LanguageAutoencoder, examples: Sequence[Example],
                            batch_size: int = 256) -> tuple[float, float]:
    """Greedy held-out reconstruction: (token accuracy, exact-match rate).

    Token accuracy compares the decoded sequence position by position
    against the input (excluding BOS, including EOS); length mismatches
    count as errors at the missing positions.
    """
    ae.eval()
    right = total = exact = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        ids, _ = pad_batch([e.ids for e in chunk])
        for out, ex in zip(ae.reconstruct(ids), chunk):
            want, got = ex.ids[1:], out[1:]
            right += sum(a == b for a, b in zip(want, got))
            total += max(len(want), len(got))
            exact += want == got
    return right / total, exact / len(examples)


@dataclass
class AutoencoderRun:
    model: LanguageAutoencoder
    corpus: Corpus
    checkpoint: Checkpoint
    losses: list[float]


def train_autoencoder(cfg: RunConfig, out_dir: Optional[Path] = None,
                      corpus: Optional[Corpus] = None) -> AutoencoderRun:
    set_determinism(cfg.seed)
    corpus = corpus or load_corpus(cfg)
    ae_cfg = replace(cfg.ae, vocab_size=len(corpus.vocab))
    ae = LanguageAutoencoder(ae_cfg)
    log_path = Path(out_dir) / "ae_scalars.tsv" if out_dir else None
    trainer = AutoencoderTrainer(ae, cfg.ae_train, log_path)
    effective = cfg.to_dict()
    effective["ae"] = ae_cfg.to_dict()

    def snapshot(extra: dict) -> Checkpoint:
        return Checkpoint(stage="ae", config=effective, vocab=corpus.vocab.to_dict(),
                          tensors=prefixed("ae", ae.state_dict()),
                          extra={"mode": corpus.mode, "labels": corpus.labels, "ae_steps": trainer.step_count,
                                 **extra})

    def on_save(step: int) -> None:
        save_checkpoint(Path(out_dir) / f"ae_step{step}.ckpt", snapshot({}))

    losses = trainer.fit(_ae_texts(corpus), on_save=on_save if out_dir else None)
    held_out = corpus.valid or corpus.train
    tok_acc, exact = reconstruction_accuracy(ae, held_out)
    log.info("autoencoder held-out token accuracy %.4f exact %.4f", tok_acc, exact)
    ckpt = snapshot({"valid_token_acc": tok_acc, "valid_exact": exact})
    if out_dir:
        save_checkpoint(Path(out_dir) / "ae.ckpt", ckpt)
    return AutoencoderRun(ae, corpus, ckpt, losses)


def load_autoencoder(ckpt: Checkpoint) -> tuple[LanguageAutoencoder, Vocabulary]:
    """Rebuild the autoencoder from any checkpoint stage that carries one."""
    if not ckpt.has("ae"):
        raise CheckpointError(f"{ckpt.stage}-stage checkpoint has no autoencoder tensors")
    ae = LanguageAutoencoder(AutoencoderConfig(**ckpt.config["ae"]))
    ae.load_state_dict(ckpt.group("ae"))
    return ae.eval(), Vocabulary.from_dict(ckpt.vocab)


def load_denoiser(ckpt: Checkpoint, ema: bool = True) -> Denoiser:
    if not ckpt.has("denoiser"):
        raise CheckpointError(f"{ckpt.stage}-stage checkpoint has no denoiser tensors")
    den = Denoiser(DenoiserConfig(**ckpt.config["denoiser"]))
    den.load_state_dict(ckpt.group("denoiser", "ema" if ema and ckpt.ema else "params"))
    return den.eval()


def denoiser_config_for(cfg: RunConfig, corpus: Corpus, ae: LanguageAutoencoder) -> DenoiserConfig:
    """Fill the data-dependent denoiser fields (classes, source width)."""
    den = replace(cfg.denoiser, latent_len=ae.cfg.latent_len, latent_dim=ae.cfg.latent_dim)
    if corpus.mode == "class":
        den = replace(den, num_classes=len(corpus.labels))
    if corpus.mode == "seq2seq":
        den = replace(den, cross_attention=True, source_dim=ae.cfg.d_model)
    return den


@dataclass
class DiffusionRun:
    model: Denoiser
    ema_model: Denoiser
    autoencoder: LanguageAutoencoder
    corpus: Corpus
    checkpoint: Checkpoint
    losses: list[float]


def train_diffusion(cfg: RunConfig, ae_ckpt: Checkpoint, out_dir: Optional[Path] = None,
                    corpus: Optional[Corpus] = None) -> DiffusionRun:
    """Train the denoiser on cached latents of a frozen autoencoder; writes a full checkpoint."""
    set_determinism(cfg.seed)
    ae, vocab = load_autoencoder(ae_ckpt)
    for p in ae.parameters():
        p.requires_grad_(False)
    corpus = corpus or load_corpus(cfg, vocab=vocab)
    if corpus.mode != ae_ckpt.extra.get("mode", corpus.mode):
        raise config_mod.ConfigError(
            f"autoencoder was trained for mode {ae_ckpt.extra['mode']!r}, run mode is {corpus.mode!r}")
    if corpus.mode == "class" and corpus.labels != ae_ckpt.extra.get("labels", corpus.labels):
        raise config_mod.ConfigError("corpus labels differ from the autoencoder checkpoint's")
    den_cfg = denoiser_config_for(cfg, corpus, ae)
    den = Denoiser(den_cfg)
    data = LatentDataset.from_examples(ae, corpus.train)
    log_path = Path(out_dir) / "diff_scalars.tsv" if out_dir else None
    trainer = DiffusionTrainer(den, cfg.diff_train, cfg.schedule.build(), log_path)
    effective = cfg.to_dict()
    effective["ae"] = ae.cfg.to_dict()
    effective["denoiser"] = den_cfg.to_dict()

    def snapshot() -> Checkpoint:
        return Checkpoint(
            stage="full", config=effective, vocab=vocab.to_dict(),
            tensors={**prefixed("ae", ae.state_dict()), **prefixed("denoiser", den.state_dict())},
            ema=prefixed("denoiser", trainer.ema.shadow), extra={**ae_ckpt.extra, "diff_steps": trainer.step_count})

    def on_save(step: int) -> None:
        save_checkpoint(Path(out_dir) / f"model_step{step}.ckpt", snapshot())

    losses = trainer.fit(data, on_save=on_save if out_dir else None)
    ckpt = snapshot()
    if out_dir:
        save_checkpoint(Path(out_dir) / "model.ckpt", ckpt)
    return DiffusionRun(den, trainer.ema_model(), ae, corpus, ckpt, losses)


# --------------------------------------------------------------------------
# sampling


@torch.no_grad()
def source_conditioning(ae: LanguageAutoencoder, vocab: Vocabulary, sources: Sequence[str]) -> Conditioning:
    ids, mask = pad_batch([vocab.encode(s) for s in sources])
    return Conditioning(source=ae.encode(ids, mask), source_mask=mask)


def label_conditioning(labels: Sequence[str], names: Sequence[str]) -> Conditioning:
    index = {n: i for i, n in enumerate(names)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise ValueError(f"unknown class labels {unknown}; known: {list(names)}")
    return Conditioning(labels=torch.tensor([index[l] for l in labels], dtype=torch.long))


@dataclass
class Generation:
    texts: list[str]
    candidates: list[list[list[str]]]
    trace: Optional[SampleTrace] = None


def generate(cfg: RunConfig, ae: LanguageAutoencoder, den: Denoiser, vocab: Vocabulary, n: int, *,
             labels: Optional[Sequence[str]] = None, label_names: Sequence[str] = (),
             sources: Optional[Sequence[str]] = None, candidates: int = 1, select: str = "mbr",
             trace: bool = False) -> Generation:
    """Sample ``n`` outputs (one per source in seq2seq mode), each chosen from ``candidates`` draws.

    ``select`` is ``mbr`` (minimum Bayes risk under negative ROUGE-L) or
    ``first`` (the first draw, i.e. a single random sample).
    """
    if candidates < 1:
        raise ValueError("candidates must be >= 1")
    if select not in ("mbr", "first"):
        raise ValueError(f"unknown selection rule {select!r}")
    cond = Conditioning()
    if cfg.mode == "seq2seq":
        if sources is None:
            raise ValueError("seq2seq sampling needs source texts")
        n = len(sources)
        cond = source_conditioning(ae, vocab, sources)
    elif cfg.mode == "class":
        if labels is None:
            raise ValueError("class-conditional sampling needs labels")
        if len(labels) != n:
            raise ValueError("need one label per sample")
        cond = label_conditioning(labels, label_names)
    cond = repeat_conditioning(cond, candidates)
    generator = torch.Generator().manual_seed(cfg.sampler.seed)
    st = SampleTrace() if trace else None
    cs = generate_text(ae, den, vocab, n * candidates, cfg.sampler, cfg.decode, cond,
                       cfg.schedule.build(), generator, st)
    groups = [cs.sequences[i * candidates:(i + 1) * candidates] for i in range(n)]
    picks = [g[mbr_index(g)] if select == "mbr" else g[0] for g in groups]
    return Generation([" ".join(p) for p in picks], groups, st)


# --------------------------------------------------------------------------
# evaluation


def evaluate(generations: Sequence[str], train_texts: Optional[Sequence[str]] = None,
             references: Optional[Sequence[str]] = None) -> tuple[dict[str, float], list[dict[str, float]]]:
    """Corpus-level report plus per-sample scores."""
    samples = [tokenize(g) for g in generations]
    index = NgramIndex([tokenize(t) for t in train_texts]) if train_texts is not None else None
    refs = None
    if references is not None:
        if len(references) != len(samples):
            raise ValueError(f"{len(samples)} generations but {len(references)} references")
        refs = [tokenize(r) for r in references]
    metrics = report(samples, index, refs)
    per_sample = []
    for i, s in enumerate(samples):
        row = {"len": float(len(s))}
        if index is not None:
            grams = [tuple(s[j:j + index.n]) for j in range(len(s) - index.n + 1)]
            row["mem"] = sum(g in index for g in grams) / len(grams) if grams else 0.0
        if refs is not None:
            row["rougeL"] = rouge(s, refs[i])[2]
        per_sample.append(row)
    return metrics, per_sample
