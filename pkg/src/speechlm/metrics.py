"""CER / WER / corpus BLEU.

All metrics normalise first: lowercase, drop the punctuation set
``.,?!，。？！、`` and collapse whitespace. CER counts non-whitespace
characters; WER splits on whitespace.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from typing import Sequence

from .errors import InputError

PUNCTUATION = ".,?!，。？！、"
_PUNCT_RE = re.compile("[" + re.escape(PUNCTUATION) + "]")


def normalize_text(text: str) -> str:
    text = _PUNCT_RE.sub("", text.lower())
    return " ".join(text.split())


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs, two-row dynamic programme."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def char_units(text: str, normalize: bool = True) -> list[str]:
    if normalize:
        text = normalize_text(text)
    return [c for c in text if not c.isspace()]


def word_units(text: str, normalize: bool = True) -> list[str]:
    if normalize:
        text = normalize_text(text)
    return text.split()


def cer(ref: str, hyp: str, normalize: bool = True) -> float:
    r, h = char_units(ref, normalize), char_units(hyp, normalize)
    if not r:
        raise InputError("reference is empty after normalisation")
    return edit_distance(r, h) / len(r)


def wer(ref: str, hyp: str, normalize: bool = True) -> float:
    r, h = word_units(ref, normalize), word_units(hyp, normalize)
    if not r:
        raise InputError("reference has no words after normalisation")
    return edit_distance(r, h) / len(r)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(refs: Sequence[str], hyps: Sequence[str], max_order: int = 4, char_level: bool = False,
               normalize: bool = True):
    """Corpus totals: (clipped matches per order, hyp n-grams per order, ref length, hyp length)."""
    if len(refs) != len(hyps):
        raise InputError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs:
        raise InputError("empty corpus")
    split = char_units if char_level else word_units
    matches, totals = [0] * max_order, [0] * max_order
    ref_len = hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        r, h = split(ref, normalize), split(hyp, normalize)
        ref_len += len(r)
        hyp_len += len(h)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += sum(hc.values())
    return matches, totals, ref_len, hyp_len


def bleu(refs: Sequence[str], hyps: Sequence[str], max_order: int = 4, smooth: bool = False,
         char_level: bool = False, normalize: bool = True) -> float:
    """Corpus BLEU in [0, 100], one reference per hypothesis.

    Without ``smooth`` any order with zero clipped matches gives 0. Orders for
    which the hypothesis corpus has no n-grams at all (every line shorter than
    n) are left out of the geometric mean. ``smooth`` adds one to matches and
    totals for orders above 1.
    """
    matches, totals, ref_len, hyp_len = bleu_stats(refs, hyps, max_order, char_level, normalize)
    if hyp_len == 0:
        return 0.0
    logs = []
    for n, (m, t) in enumerate(zip(matches, totals), 1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(logs) / len(logs))
