"""Command line entry point: ``latentlang {train-ae,train-diff,sample,eval,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint
from .config import (PROFILES, ConfigError, RunConfig, build_config, from_dict, load_config_file,
                     parse_override)
from .data import GRAMMARS, MODES, CorpusFormatError, ingest, read_lines, synth_grammar
from .metrics import format_report

RUN_ROOT_ENV = "LATENTLANG_RUN_ROOT"

log = logging.getLogger("latentlang")


def resolve(path: Optional[str]) -> Optional[Path]:
    """Relative paths are taken under ``$LATENTLANG_RUN_ROOT`` when it is set."""
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--profile", choices=PROFILES, help="size profile (default desk)")
    p.add_argument("--mode", choices=MODES, help="task mode")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable)")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--out", required=True, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentlang", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ae", help="train the language autoencoder")
    _common(p, "run directory for ae.ckpt, config.json and scalars")
    p.add_argument("--corpus", help="training corpus (overrides data.corpus)")

    p = sub.add_parser("train-diff", help="train the latent denoiser on a frozen autoencoder")
    _common(p, "run directory for model.ckpt, config.json and scalars")
    p.add_argument("--corpus", help="training corpus (overrides data.corpus)")

    p = sub.add_parser("sample", help="generate text from a full checkpoint")
    _common(p, "file receiving one generation per line")
    p.add_argument("-n", "--num", type=int, default=100, help="samples (ignored in seq2seq mode)")
    p.add_argument("--label", help="class name for every sample (class mode)")
    p.add_argument("--labels-file", help="one class name per line (class mode)")
    p.add_argument("--sources", help="one source per line (seq2seq mode)")
    p.add_argument("--candidates", type=int, default=1, help="draws per output for MBR selection")
    p.add_argument("--select", choices=("mbr", "first"), default="mbr")
    p.add_argument("--emit-stats", metavar="PATH", help="write per-step norm traces as TSV")

    p = sub.add_parser("eval", help="score a generations file")
    p.add_argument("--generations", required=True)
    p.add_argument("--corpus", help="corpus whose train split is the memorisation reference")
    p.add_argument("--mode", choices=MODES, default="unconditional")
    p.add_argument("--seed", type=int, default=0, help="split seed used for the corpus")
    p.add_argument("--references", help="one reference per line, aligned with the generations")
    p.add_argument("--per-sample", metavar="PATH", help="write per-sample scores as TSV")
    p.add_argument("--out", help="report path (always printed)")

    p = sub.add_parser("synth", help="write a synthetic grammar corpus")
    p.add_argument("grammar", choices=GRAMMARS)
    p.add_argument("-n", "--num", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def effective_config(args, base: Optional[dict] = None) -> RunConfig:
    file = load_config_file(resolve(args.config)) if args.config else {}
    if base is not None:
        # a checkpoint's effective config is the starting point; the file and flags refine it
        merged = json.loads(json.dumps(base))
        for key, value in file.items():
            if isinstance(value, dict):
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value
        file = merged
    overrides = list(args.overrides)
    if getattr(args, "corpus", None):
        overrides.append(f"data.corpus={json.dumps(str(resolve(args.corpus)))}")
    return build_config(args.profile, args.mode, file, tuple(overrides), args.seed)


def snapshot(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.to_json()
    (out_dir / "config.json").write_text(text)
    print(text, end="", file=sys.stderr)


def _base_from(ckpt) -> dict:
    """Profile-independent parts of a checkpoint's config, minus the data-derived fields."""
    base = json.loads(json.dumps(ckpt.config))
    base.get("ae", {}).pop("vocab_size", None)
    for key in ("num_classes", "cross_attention", "source_dim"):
        base.get("denoiser", {}).pop(key, None)
    return base


def cmd_train_ae(args) -> int:
    cfg = effective_config(args)
    out = resolve(args.out)
    snapshot(cfg, out)
    run = pipeline.train_autoencoder(cfg, out)
    acc = run.checkpoint.extra["valid_token_acc"]
    print(f"wrote {out / 'ae.ckpt'} (held-out token accuracy {acc:.4f})")
    return 0


def cmd_train_diff(args) -> int:
    if not args.checkpoint:
        raise ConfigError("train-diff needs --checkpoint pointing at an autoencoder checkpoint")
    ckpt = load_checkpoint(resolve(args.checkpoint))
    cfg = effective_config(args, _base_from(ckpt))
    out = resolve(args.out)
    snapshot(cfg, out)
    pipeline.train_diffusion(cfg, ckpt, out)
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def _read_plain(path) -> list[str]:
    return [line.rstrip("\n") for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_sample(args) -> int:
    if not args.checkpoint:
        raise ConfigError("sample needs --checkpoint pointing at a full checkpoint")
    ckpt = load_checkpoint(resolve(args.checkpoint))
    ae, vocab = pipeline.load_autoencoder(ckpt)
    den = pipeline.load_denoiser(ckpt)
    base = json.loads(json.dumps(ckpt.config))
    file = load_config_file(resolve(args.config)) if args.config else {}
    for key, value in file.items():
        if key in ("sampler", "decode", "schedule") and isinstance(value, dict):
            base[key].update(value)
    cfg = from_dict(base)
    for text in args.overrides:
        section, key, value = parse_override(text)
        if section not in ("sampler", "decode", "schedule") or key is None:
            raise ConfigError(f"sample only accepts sampler/decode/schedule overrides, got {text!r}")
        try:
            setattr(cfg, section, replace(getattr(cfg, section), **{key: value}))
        except TypeError as exc:
            raise ConfigError(f"bad override {text!r}: {exc}") from exc
    if args.seed is not None:
        cfg.sampler = replace(cfg.sampler, seed=args.seed)
    cfg.validate()
    pipeline.set_determinism(cfg.seed)

    labels = sources = None
    n = args.num
    if cfg.mode == "seq2seq":
        if not args.sources:
            raise ConfigError("seq2seq checkpoints need --sources")
        sources = _read_plain(resolve(args.sources))
    elif cfg.mode == "class":
        if args.labels_file:
            labels = _read_plain(resolve(args.labels_file))
            n = len(labels)
        elif args.label:
            labels = [args.label] * n
        else:
            raise ConfigError("class checkpoints need --label or --labels-file")
    gen = pipeline.generate(cfg, ae, den, vocab, n, labels=labels, label_names=ckpt.extra.get("labels", []),
                            sources=sources, candidates=args.candidates, select=args.select,
                            trace=bool(args.emit_stats))
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(t + "\n" for t in gen.texts), encoding="utf-8")
    if args.emit_stats:
        stats = resolve(args.emit_stats)
        stats.parent.mkdir(parents=True, exist_ok=True)
        stats.write_text(gen.trace.to_tsv())
    print(f"wrote {len(gen.texts)} generations to {out}")
    return 0


def cmd_eval(args) -> int:
    gens = _read_plain(resolve(args.generations))
    train_texts = None
    if args.corpus:
        train_texts = [e.text for e in ingest(resolve(args.corpus), args.mode, seed=args.seed).train]
    refs = _read_plain(resolve(args.references)) if args.references else None
    metrics, per_sample = pipeline.evaluate(gens, train_texts, refs)
    text = format_report(metrics)
    print(text, end="")
    if args.out:
        out = resolve(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    if args.per_sample:
        keys = list(per_sample[0]) if per_sample else []
        rows = ["index\t" + "\t".join(keys)]
        rows += [f"{i}\t" + "\t".join(f"{r[k]:.6f}" for k in keys) for i, r in enumerate(per_sample)]
        path = resolve(args.per_sample)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(rows) + "\n")
    return 0


def cmd_synth(args) -> int:
    corpus = synth_grammar(args.grammar, args.num, args.seed)
    out = resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.write(out)
    read_lines(out, corpus.mode)
    print(f"wrote {args.num} {args.grammar} samples ({corpus.mode}) to {out}")
    return 0


COMMANDS = {
    "train-ae": cmd_train_ae,
    "train-diff": cmd_train_diff,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, CorpusFormatError, ValueError, FileNotFoundError) as exc:
        print(f"latentlang {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
