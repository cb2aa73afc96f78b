"""Okapi BM25 over an in-memory inverted index.

IDF uses the +1 variant ln(1 + (N - df + 0.5)/(df + 0.5)), which keeps every
score non-negative even for terms present in most documents.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class RetrievalConfig:
    c: int = 3
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.c < 1:
            raise ValueError("c must be at least 1")
        if self.k1 <= 0:
            raise ValueError("k1 must be positive")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")


def search_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Bm25Index:
    """Immutable after construction; safe for concurrent queries."""

    def __init__(self, docs: dict[str, str], k1: float = 1.2, b: float = 0.75):
        if not docs:
            raise ValueError("cannot index an empty corpus")
        self.k1 = k1
        self.b = b
        self.doc_ids = sorted(docs)
        self.term_freqs: dict[str, Counter] = {}
        self.lengths: dict[str, int] = {}
        df = Counter()
        for doc_id in self.doc_ids:
            toks = search_tokens(docs[doc_id])
            tf = Counter(toks)
            self.term_freqs[doc_id] = tf
            self.lengths[doc_id] = len(toks)
            df.update(tf.keys())
        self.df = dict(df)
        self.n_docs = len(self.doc_ids)
        self.avg_len = sum(self.lengths.values()) / self.n_docs

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query: str, doc_id: str) -> float:
        tf = self.term_freqs[doc_id]
        dl = self.lengths[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_len)
        total = 0.0
        for term in search_tokens(query):
            f = tf.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total


def build_index(documents, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Accepts either {doc_id: text} or objects with .id and .text."""
    if isinstance(documents, dict):
        return Bm25Index(documents, k1=k1, b=b)
    return Bm25Index({d.id: d.text for d in documents}, k1=k1, b=b)


def retrieve(index: Bm25Index, query: str, c: int) -> list[tuple[str, float]]:
    """Top-c (doc_id, score) by descending score, ties broken by ascending id."""
    if not search_tokens(query):
        return []
    scored = [(doc_id, index.score(query, doc_id)) for doc_id in index.doc_ids]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(c, len(scored))]
