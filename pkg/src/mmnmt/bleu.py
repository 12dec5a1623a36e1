"""Corpus- and sentence-level BLEU-4 on whitespace tokens (case-sensitive)."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

MAX_ORDER = 4


@dataclass
class BleuReport:
    precisions: list      # p_1..p_4
    matches: list
    totals: list
    brevity_penalty: float
    score: float          # 0..100
    hyp_len: int
    ref_len: int

    def to_tsv(self) -> str:
        header = "p1\tp2\tp3\tp4\tBP\tBLEU\thyp_len\tref_len"
        vals = [f"{p:.6f}" for p in self.precisions] + [
            f"{self.brevity_penalty:.6f}", f"{self.score:.4f}", str(self.hyp_len), str(self.ref_len)]
        return header + "\n" + "\t".join(vals) + "\n"


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _tok(x):
    return x.split() if isinstance(x, str) else list(x)


def _stats(cand, ref):
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        c, r = ngrams(cand, n), ngrams(ref, n)
        matches.append(sum(min(k, r[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def _combine(matches, totals, hyp_len, ref_len, smooth: bool) -> BleuReport:
    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smooth and n >= 2:
            precisions.append((m + 1.0) / (t + 1.0))
        else:
            # an order with no candidate n-grams has nothing to contradict the reference
            precisions.append(m / t if t > 0 else 1.0)
    bp = brevity_penalty(hyp_len, ref_len)
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER) * 100.0
    return BleuReport(precisions, list(matches), list(totals), bp, score, hyp_len, ref_len)


def corpus_bleu4(candidates, references) -> BleuReport:
    """Papineni BLEU-4: clipped n-gram counts and lengths summed over the corpus.

    Sentences may be strings or token lists. One reference per candidate.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    if not candidates:
        raise ValueError("corpus_bleu4: empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _tok(cand), _tok(ref)
        m, t = _stats(cand, ref)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += len(cand)
        ref_len += len(ref)
    return _combine(matches, totals, hyp_len, ref_len, smooth=False)


def sentence_bleu4(candidate, reference) -> float:
    """Sentence BLEU-4 with add-one smoothing of the 2..4-gram precisions."""
    cand, ref = _tok(candidate), _tok(reference)
    m, t = _stats(cand, ref)
    return _combine(m, t, len(cand), len(ref), smooth=True).score
