"""Vocabulary, corpus ingestion and synthetic toy grammars."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import torch

MODES = ("unconditional", "class", "seq2seq")


class CorpusFormatError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.split()


class Vocabulary:
    """Word-level vocabulary with fixed special ids."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, tokens: Sequence[str], max_len: int = 64):
        if max_len < 2:
            raise ValueError("max_len must leave room for BOS and EOS")
        self.itos = list(self.SPECIALS) + [t for t in tokens if t not in self.SPECIALS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")
        self.max_len = max_len

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 4096, max_len: int = 64) -> "Vocabulary":
        counts = Counter(tok for text in texts for tok in tokenize(text))
        ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(ranked[: max(0, max_size - len(cls.SPECIALS))], max_len=max_len)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.max_len == other.max_len

    def encode(self, text: str | Sequence[str]) -> list[int]:
        """Frame with BOS/EOS, truncating so the result fits ``max_len``."""
        toks = tokenize(text) if isinstance(text, str) else list(text)
        body = [self.stoi.get(t, self.UNK) for t in toks[: self.max_len - 2]]
        return [self.BOS] + body + [self.EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens up to the first EOS, specials other than UNK dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.EOS:
                break
            if i in (self.PAD, self.BOS):
                continue
            out.append(self.itos[i])
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.itos[len(self.SPECIALS):], "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], max_len=d["max_len"])


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = Vocabulary.PAD) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id lists; returns ``(ids, mask)`` with mask True on real tokens."""
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, ids != pad


@dataclass
class Example:
    text: str
    ids: list[int]
    label: Optional[int] = None
    source: Optional[str] = None
    source_ids: Optional[list[int]] = None


@dataclass
class Corpus:
    mode: str
    vocab: Vocabulary
    labels: list[str]
    train: list[Example]
    valid: list[Example]
    test: list[Example]


def read_lines(path: str | Path, mode: str) -> list[tuple[Optional[str], str]]:
    """Parse a corpus file into ``(field_a, text)`` pairs.

    ``field_a`` is None for unconditional corpora, the label for class
    corpora, and the source text for seq2seq corpora.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    raw = Path(path).read_text(encoding="utf-8").splitlines()
    rows = []
    for lineno, line in enumerate(raw, 1):
        if mode == "unconditional":
            if not line.strip():
                raise CorpusFormatError(f"{path}:{lineno}: empty sample")
            rows.append((None, line.strip()))
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise CorpusFormatError(f"{path}:{lineno}: expected two non-empty tab-separated fields")
        rows.append((parts[0].strip(), parts[1].strip()))
    if not rows:
        raise CorpusFormatError(f"{path}: empty corpus")
    return rows


def split_rows(rows: list, valid_frac: float, test_frac: float, seed: int):
    if not (0 <= valid_frac < 1 and 0 <= test_frac < 1 and valid_frac + test_frac < 1):
        raise ValueError("split fractions must be in [0, 1) and sum below 1")
    order = list(range(len(rows)))
    random.Random(seed).shuffle(order)
    n_valid = int(round(len(rows) * valid_frac))
    n_test = int(round(len(rows) * test_frac))
    valid = [rows[i] for i in order[:n_valid]]
    test = [rows[i] for i in order[n_valid:n_valid + n_test]]
    train = [rows[i] for i in order[n_valid + n_test:]]
    return train, valid, test


def ingest(path: str | Path, mode: str, *, max_len: int = 64, valid_frac: float = 0.05,
           test_frac: float = 0.05, seed: int = 0, max_vocab: int = 4096,
           vocab: Optional[Vocabulary] = None) -> Corpus:
    """Read, split and encode a corpus; the vocabulary comes from the train split unless given."""
    rows = read_lines(path, mode)
    train, valid, test = split_rows(rows, valid_frac, test_frac, seed)
    if vocab is None:
        if mode == "seq2seq":
            vocab_texts = [t for pair in train for t in pair]
        else:
            vocab_texts = [text for _, text in train]
        vocab = Vocabulary.build(vocab_texts, max_size=max_vocab, max_len=max_len)
    labels = sorted({a for a, _ in rows}) if mode == "class" else []
    label_id = {name: i for i, name in enumerate(labels)}

    def make(rows_):
        out = []
        for a, text in rows_:
            ex = Example(text=text, ids=vocab.encode(text))
            if mode == "class":
                ex.label = label_id[a]
            elif mode == "seq2seq":
                ex.source, ex.source_ids = a, vocab.encode(a)
            out.append(ex)
        return out

    return Corpus(mode, vocab, labels, make(train), make(valid), make(test))


# --------------------------------------------------------------------------
# synthetic grammars


def has_repeated_ngram(tokens: Sequence[str], n: int = 3) -> bool:
    seen = set()
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        if gram in seen:
            return True
        seen.add(gram)
    return False


NUMBERS = [str(i) for i in range(100)]
OPERATORS = ["+", "-", "*"]


def _arith_expr(rng: random.Random, depth: int) -> list[str]:
    toks = _arith_operand(rng, depth)
    for _ in range(rng.randint(1, 2)):
        toks += [rng.choice(OPERATORS)] + _arith_operand(rng, depth)
    return toks


def _arith_operand(rng: random.Random, depth: int) -> list[str]:
    if depth > 0 and rng.random() < 0.3:
        return ["("] + _arith_expr(rng, depth - 1) + [")"]
    return [rng.choice(NUMBERS)]


def is_arith(text: str) -> bool:
    """Membership in the language of well-formed bracketed arithmetic.

    ``expr := operand (op operand)*`` and ``operand := number | ( expr )``
    at any depth.  The sampler only produces a bounded subset of it.
    """
    toks = tokenize(text)
    pos = 0

    def operand():
        nonlocal pos
        if pos < len(toks) and toks[pos] == "(":
            pos += 1
            if not expr() or pos >= len(toks) or toks[pos] != ")":
                return False
            pos += 1
            return True
        if pos < len(toks) and toks[pos] in _NUMBER_SET:
            pos += 1
            return True
        return False

    def expr():
        nonlocal pos
        if not operand():
            return False
        while pos < len(toks) and toks[pos] in OPERATORS:
            pos += 1
            if not operand():
                return False
        return True

    return bool(toks) and expr() and pos == len(toks)


_NUMBER_SET = frozenset(NUMBERS)
ARITH_DEPTH = 1
ARITH_MAX_TOKENS = 15


# two topic classes with disjoint templates; "{x}" slots draw from the lexicon
TOPICS = {
    "sports": {
        "templates": [
            "the {team} beat the {team} by {small} points on {day}",
            "{player} scored {small} goals as the {team} won at home",
            "coach {player} praised the {team} defense after the {game}",
            "fans cheered when {player} hit a {shot} in the {game}",
        ],
        "lexicon": {
            "team": ["tigers", "eagles", "sharks", "wolves", "falcons", "rangers", "giants", "rockets"],
            "player": ["smith", "garcia", "okafor", "ivanova", "chen", "moreau", "silva", "novak"],
            "small": ["two", "three", "four", "five", "six", "seven"],
            "day": ["monday", "friday", "saturday", "sunday"],
            "game": ["final", "derby", "playoff", "opener"],
            "shot": ["volley", "header", "rebound", "penalty"],
        },
    },
    "science": {
        "templates": [
            "researchers at {lab} found a new {thing} in {field} samples",
            "a study of {thing} suggests {field} models need revision",
            "scientists measured {thing} levels using a {device} at {lab}",
            "the {device} revealed unexpected {thing} behaviour in {field}",
        ],
        "lexicon": {
            "lab": ["caltech", "cern", "eth", "mit", "oxford", "riken", "inria", "mpi"],
            "thing": ["protein", "enzyme", "isotope", "crystal", "bacterium", "polymer", "neutrino", "alloy"],
            "field": ["ocean", "soil", "climate", "plasma", "genome", "quantum"],
            "device": ["telescope", "microscope", "spectrometer", "sequencer", "laser"],
        },
    },
}


def _fill(template: str, lexicon: dict, rng: random.Random) -> str:
    out = []
    for tok in template.split():
        if tok.startswith("{") and tok.endswith("}"):
            out.append(rng.choice(lexicon[tok[1:-1]]))
        else:
            out.append(tok)
    return " ".join(out)


def topic_validator(topic: str) -> Callable[[str], bool]:
    spec = TOPICS[topic]
    patterns = []
    for template in spec["templates"]:
        slots = []
        for tok in template.split():
            if tok.startswith("{") and tok.endswith("}"):
                slots.append(frozenset(spec["lexicon"][tok[1:-1]]))
            else:
                slots.append(frozenset([tok]))
        patterns.append(slots)

    def check(text: str) -> bool:
        toks = tokenize(text)
        return any(len(p) == len(toks) and all(t in s for t, s in zip(toks, p)) for p in patterns)

    return check


REVERSAL_WORDS = [f"w{i}" for i in range(16)]


def is_reversal_pair(source: str, target: str) -> bool:
    return tokenize(target) == tokenize(source)[::-1]


@dataclass
class SynthCorpus:
    """Generated samples plus membership predicates.

    ``lines`` are formatted for :func:`ingest` in ``mode``.  ``validators``
    maps a class name (or ``"all"``) to a text predicate.
    """

    grammar: str
    mode: str
    lines: list[str]
    validators: dict[str, Callable[[str], bool]] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines) + "\n", encoding="utf-8")


GRAMMARS = ("arith", "topics", "reversal")


def synth_grammar(grammar: str, n: int, seed: int = 0) -> SynthCorpus:
    """Sample ``n`` strings from a toy grammar.

    Samples with a repeated trigram are rejected so every member decodes
    cleanly under trigram blocking.
    """
    if grammar not in GRAMMARS:
        raise ValueError(f"unknown grammar {grammar!r}; choose from {GRAMMARS}")
    rng = random.Random(seed)
    lines: list[str] = []
    while len(lines) < n:
        if grammar == "arith":
            toks = _arith_expr(rng, ARITH_DEPTH)
            if len(toks) > ARITH_MAX_TOKENS or has_repeated_ngram(toks):
                continue
            lines.append(" ".join(toks))
        elif grammar == "topics":
            topic = rng.choice(sorted(TOPICS))
            text = _fill(rng.choice(TOPICS[topic]["templates"]), TOPICS[topic]["lexicon"], rng)
            if has_repeated_ngram(tokenize(text)):
                continue
            lines.append(f"{topic}\t{text}")
        else:
            toks = [rng.choice(REVERSAL_WORDS) for _ in range(rng.randint(3, 8))]
            if has_repeated_ngram(toks):
                continue
            lines.append(" ".join(toks) + "\t" + " ".join(reversed(toks)))
    if grammar == "arith":
        return SynthCorpus(grammar, "unconditional", lines, {"all": is_arith})
    if grammar == "topics":
        return SynthCorpus(grammar, "class", lines, {t: topic_validator(t) for t in TOPICS})
    return SynthCorpus(grammar, "seq2seq", lines, {})
