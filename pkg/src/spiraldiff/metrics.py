"""BLEU and ROUGE-L over token sequences."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
import math
from typing import Sequence


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu(hyp: Sequence, refs: Sequence[Sequence], max_n: int = 4, smoothing: bool = True) -> float:
    """Sentence BLEU with clipped n-gram precision and brevity penalty.

    With ``smoothing`` each order n >= 2 whose clipped match count is zero
    uses ``(0 + 1) / (count + 1)`` instead of 0.  Unigram precision is never
    smoothed, so hypotheses sharing no token with any reference score 0.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not hyp or not refs:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = ngrams(hyp, n)
        total = sum(counts.values())
        max_ref = Counter()
        for ref in refs:
            max_ref |= ngrams(ref, n)
        match = sum(min(c, max_ref[g]) for g, c in counts.items())
        if match == 0 and smoothing and n >= 2:
            p = 1.0 / (total + 1)
        elif total == 0:
            p = 1.0 if smoothing else 0.0
        else:
            p = match / total
        if p == 0:
            return 0.0
        log_sum += math.log(p) / max_n
    c = len(hyp)
    r = _closest_ref_len(c, refs)
    bp = min(1.0, math.exp(1.0 - r / c))
    return math.exp(log_sum) * bp


def corpus_bleu_counts(hyps, refs_list, max_n: int = 4) -> float:
    """Corpus BLEU from pooled n-gram counts (no smoothing)."""
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hyps, refs_list):
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), refs) if refs else 0
        for n in range(1, max_n + 1):
            counts = ngrams(hyp, n)
            max_ref = Counter()
            for ref in refs:
                max_ref |= ngrams(ref, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    return math.exp(log_p) * min(1.0, math.exp(1.0 - ref_len / hyp_len))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence, ref: Sequence) -> float:
    """LCS-based F1."""
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


@dataclass
class MetricReport:
    bleu: float
    rouge_l: float
    n: int
    exact_match: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(hyps, refs, corpus_counts: bool = False) -> tuple[MetricReport, list[dict]]:
    """Score aligned hypothesis/reference token lists."""
    if len(hyps) != len(refs):
        raise ValueError("hypotheses and references differ in length")
    if not hyps:
        raise ValueError("nothing to evaluate")
    rows = []
    for h, r in zip(hyps, refs):
        rows.append({"bleu": bleu(h, [r]), "rouge_l": rouge_l(h, r), "exact": float(list(h) == list(r))})
    n = len(rows)
    report = MetricReport(
        bleu=corpus_bleu_counts(hyps, [[r] for r in refs]) if corpus_counts
        else sum(x["bleu"] for x in rows) / n,
        rouge_l=sum(x["rouge_l"] for x in rows) / n,
        n=n,
        exact_match=sum(x["exact"] for x in rows) / n,
    )
    return report, rows
