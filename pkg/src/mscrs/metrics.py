"""Ranking and generation metrics.

Ranking instances carry a single ground-truth item each; a turn with
several labels becomes several instances upstream. Generation metrics work
on whitespace tokens, lowercased, punctuation kept. Distinct-N pools
n-grams over the whole corpus; callers that want the percent-scaled column
multiply by 100 themselves (both appear in CLI reports).
"""

from __future__ import annotations

import math
from collections import Counter


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def _rank_of(label, ranked: list) -> int | None:
    """1-based rank, or None when the label is absent."""
    try:
        return ranked.index(label) + 1
    except ValueError:
        return None


def rank_metrics(results: list[tuple[list, object]],
                 recall_ks: tuple = (1, 10, 50),
                 ndcg_ks: tuple = (10, 50),
                 mrr_ks: tuple = (10, 50)) -> dict[str, float]:
    """Mean Recall@k, NDCG@k and MRR@k over (ranked list, label) pairs."""
    if not results:
        raise MetricError("no ranking results to score")
    for ks in (recall_ks, ndcg_ks, mrr_ks):
        if any(k < 1 for k in ks):
            raise MetricError("cutoffs must be positive")
    out = {}
    ranks = []
    for ranked, label in results:
        if len(set(ranked)) != len(ranked):
            raise MetricError("ranked list contains duplicates")
        ranks.append(_rank_of(label, ranked))
    n = len(ranks)
    for k in recall_ks:
        out[f"recall@{k}"] = sum(1 for r in ranks if r is not None and r <= k) / n
    for k in ndcg_ks:
        out[f"ndcg@{k}"] = sum(1.0 / math.log2(r + 1) for r in ranks
                               if r is not None and r <= k) / n
    for k in mrr_ks:
        out[f"mrr@{k}"] = sum(1.0 / r for r in ranks if r is not None and r <= k) / n
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _norm(tokens: list[str]) -> list[str]:
    return [t.lower() for t in tokens]


def bleu(hypotheses: list[list[str]], references: list[list[str]], n: int) -> float:
    """Corpus-level clipped n-gram precision of order ``n`` with brevity penalty."""
    if n < 1:
        raise MetricError("n must be >= 1")
    if len(hypotheses) != len(references):
        raise MetricError("hypothesis/reference count mismatch")
    matched = total = 0
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _norm(hyp), _norm(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        hyp_counts = Counter(_ngrams(hyp, n))
        ref_counts = Counter(_ngrams(ref, n))
        total += sum(hyp_counts.values())
        matched += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if total == 0 or matched == 0:
        return 0.0
    precision = matched / total
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * precision


def sentence_bleu(hyp: list[str], ref: list[str], n: int) -> float:
    return bleu([hyp], [ref], n)


def _lcs_len(a: list[str], b: list[str]) -> int:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def rouge(hyp: list[str], ref: list[str], variant: str) -> float:
    """ROUGE-2 (bigram overlap F1) or ROUGE-L (LCS F1)."""
    hyp, ref = _norm(hyp), _norm(ref)
    if not hyp or not ref:
        return 0.0
    if variant == "2":
        hyp_bi = Counter(_ngrams(hyp, 2))
        ref_bi = Counter(_ngrams(ref, 2))
        overlap = sum(min(c, ref_bi[g]) for g, c in hyp_bi.items())
        total_h = sum(hyp_bi.values())
        total_r = sum(ref_bi.values())
        if total_h == 0 or total_r == 0:
            return 0.0
        return _f1(overlap / total_h, overlap / total_r)
    if variant == "L":
        lcs = _lcs_len(hyp, ref)
        return _f1(lcs / len(hyp), lcs / len(ref))
    raise MetricError(f"unknown rouge variant {variant!r}")


def corpus_rouge(hypotheses: list[list[str]], references: list[list[str]],
                 variant: str) -> float:
    if len(hypotheses) != len(references):
        raise MetricError("hypothesis/reference count mismatch")
    if not hypotheses:
        return 0.0
    return sum(rouge(h, r, variant) for h, r in zip(hypotheses, references)) \
        / len(hypotheses)


def distinct(hypotheses: list[list[str]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled over the whole corpus."""
    if n < 1:
        raise MetricError("n must be >= 1")
    pool: list[tuple[str, ...]] = []
    for hyp in hypotheses:
        pool.extend(_ngrams(_norm(hyp), n))
    if not pool:
        return 0.0
    return len(set(pool)) / len(pool)


def generation_report(hypotheses: list[list[str]],
                      references: list[list[str]]) -> dict[str, float]:
    report = {
        "bleu@2": bleu(hypotheses, references, 2),
        "bleu@3": bleu(hypotheses, references, 3),
        "rouge@2": corpus_rouge(hypotheses, references, "2"),
        "rouge@L": corpus_rouge(hypotheses, references, "L"),
    }
    for n in (2, 3, 4):
        value = distinct(hypotheses, n)
        report[f"distinct@{n}"] = value
        report[f"distinct@{n}_pct"] = value * 100.0
    return report
