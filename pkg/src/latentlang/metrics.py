"""N-gram diversity, memorisation, ROUGE and BLEU over token lists.

Ratios are accumulated as exact fractions and rounded once, so results do
not depend on summation order.
"""

from __future__ import annotations

import math
from collections import Counter
from fractions import Fraction
from typing import Iterable, Sequence

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> list[tuple]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def diversity(samples: Sequence[Tokens], orders: Iterable[int] = (2, 3, 4)) -> float:
    """Product over n of unique/total n-grams pooled across samples.

    Returns 0.0 if some order has no n-grams at all.
    """
    if not samples:
        raise ValueError("diversity needs at least one sample")
    value = Fraction(1)
    for n in orders:
        grams = [g for s in samples for g in ngrams(s, n)]
        if not grams:
            return 0.0
        value *= Fraction(len(set(grams)), len(grams))
    return float(value)


class NgramIndex:
    """Set of training-corpus n-grams used for memorisation checks."""

    def __init__(self, corpus: Iterable[Tokens], n: int = 4):
        self.n = n
        self.grams = {g for s in corpus for g in ngrams(s, n)}

    def __contains__(self, gram) -> bool:
        return tuple(gram) in self.grams

    def __len__(self):
        return len(self.grams)


def memorization(samples: Sequence[Tokens], index: NgramIndex) -> float:
    """Fraction of generated n-gram occurrences found in the training index."""
    grams = [g for s in samples for g in ngrams(s, index.n)]
    if not grams:
        return 0.0
    return float(Fraction(sum(g in index.grams for g in grams), len(grams)))


def _overlap_f1(cand: Counter, ref: Counter) -> Fraction:
    c_total, r_total = sum(cand.values()), sum(ref.values())
    if not c_total or not r_total:
        return Fraction(0)
    overlap = sum((cand & ref).values())
    return Fraction(2 * overlap, c_total + r_total)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge(candidate: Tokens, reference: Tokens) -> tuple[float, float, float]:
    """ROUGE-1, ROUGE-2 and ROUGE-L F1 on a 0-100 scale."""
    r1 = _overlap_f1(Counter(ngrams(candidate, 1)), Counter(ngrams(reference, 1)))
    r2 = _overlap_f1(Counter(ngrams(candidate, 2)), Counter(ngrams(reference, 2)))
    if candidate and reference:
        rl = Fraction(2 * lcs_length(candidate, reference), len(candidate) + len(reference))
    else:
        rl = Fraction(0)
    return float(100 * r1), float(100 * r2), float(100 * rl)


def corpus_rouge(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> tuple[float, float, float]:
    """Mean per-pair ROUGE scores."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need equally many (>0) candidates and references")
    scores = [rouge(c, r) for c, r in zip(candidates, references)]
    return tuple(sum(col) / len(scores) for col in zip(*scores))


def bleu_counts(candidates: Sequence[Tokens], references: Sequence[Tokens], max_order: int = 4):
    """Clipped n-gram matches and totals per order, plus corpus lengths."""
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            c, r = Counter(ngrams(cand, n)), Counter(ngrams(ref, n))
            matches[n - 1] += sum((c & r).values())
            totals[n - 1] += sum(c.values())
    return matches, totals, cand_len, ref_len


def bleu_from_counts(matches, totals, cand_len, ref_len) -> float:
    """Corpus BLEU (0-100) from sufficient statistics.

    Unigram precision is unsmoothed; orders >= 2 with zero matches use
    add-one smoothing, 1 / (total + 1).
    """
    if cand_len == 0 or totals[0] == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n, (m, t) in enumerate(zip(matches, totals)):
        if n > 0 and m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t)
    log_p /= len(matches)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_order: int = 4) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    return bleu_from_counts(*bleu_counts(candidates, references, max_order))


def report(samples: Sequence[Tokens], train_index: NgramIndex | None = None,
           references: Sequence[Tokens] | None = None) -> dict[str, float]:
    """Assemble the available metrics into a flat dict."""
    out = {"n": float(len(samples)), "div": diversity(samples)}
    if train_index is not None:
        out["mem"] = memorization(samples, train_index)
    if references is not None:
        r1, r2, rl = corpus_rouge(samples, references)
        out.update(rouge1=r1, rouge2=r2, rougeL=rl, bleu=bleu(samples, references))
    return out


def format_report(metrics: dict[str, float]) -> str:
    return "".join(f"{k}\t{v:.6f}\n" for k, v in metrics.items())
