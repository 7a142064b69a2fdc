"""Detection accuracy, ROUGE-L and bag-of-tokens F1."""

from __future__ import annotations

from collections import Counter
from typing import Hashable, Sequence


def detect_accuracy(predictions: Sequence[str], labels: Sequence[str]) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise ValueError("need at least one label")
    return sum(p == l for p, l in zip(predictions, labels)) / len(labels)


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Longest common subsequence length, O(|a||b|) dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def f_beta(precision: float, recall: float, beta: float = 1.0) -> float:
    if precision == 0.0 and recall == 0.0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * precision * recall / (recall + b2 * precision)


def rouge_l(candidate: Sequence[Hashable], reference: Sequence[Hashable], beta: float = 1.0) -> float:
    """LCS-based F-beta of precision LCS/|candidate| and recall LCS/|reference|.

    Written as (1 + b^2) * LCS / (|candidate| + b^2 |reference|), which equals
    the precision/recall form and, for beta = 1, is a single exact division.
    """
    if not reference:
        raise ValueError("reference must be non-empty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    b2 = beta * beta
    return (1 + b2) * lcs / (len(candidate) + b2 * len(reference))


def token_f1(candidate: Sequence[Hashable], reference: Sequence[Hashable]) -> float:
    """Multiset token overlap F1."""
    if not candidate or not reference:
        return 0.0
    common = sum((Counter(candidate) & Counter(reference)).values())
    if common == 0:
        return 0.0
    return f_beta(common / len(candidate), common / len(reference))
