"""Term-overlap retrieval over the corpus.

Deliberately the simplest deterministic scorer: the kill chain only needs the
attacker's email to be pulled in through the normal retrieval path, so plain
query-term overlap with a stable tie-break stands in for a production ranker.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import ContentItem, TrustTier

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class RetrievalResult:
    item_id: str
    score: float
    tier: TrustTier


def tokenize(text: str) -> list[str]:
    """Lowercase terms split on non-alphanumeric boundaries; empties dropped."""
    return _TOKEN_RE.findall(text.lower())


def score(query_terms: list[str], item: ContentItem) -> float:
    """|query ∩ item| / |query| with set semantics; 0.0 for an empty query."""
    qset = set(query_terms)
    if not qset:
        return 0.0
    item_terms = set(tokenize(item.subject)) | set(tokenize(item.body))
    return len(qset & item_terms) / len(qset)


def retrieve(
    query: str,
    corpus: list[ContentItem],
    k: int,
    tier_floor: TrustTier | None = None,
) -> list[RetrievalResult]:
    """Top-k positive-score items, optionally restricted to tiers >= tier_floor.

    Without a tier floor the attacker's external email is eligible alongside
    internal content — the precondition for the scope violation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    scored = []
    for item in corpus:
        if tier_floor is not None and item.tier < tier_floor:
            continue
        s = score(terms, item)
        if s > 0:
            scored.append(RetrievalResult(item_id=item.id, score=s, tier=item.tier))
    scored.sort(key=lambda r: (-r.score, r.item_id))
    return scored[:k]
