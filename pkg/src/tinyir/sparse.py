"""Inverted-index BM25 scoring, ranking, and hard-negative mining.

Scores follow the Okapi form: idf(t) * tf*(k1+1) / (tf + k1*(1-b+b*|d|/avgdl)),
summed over the query as a sequence (repeated query terms contribute once per
occurrence). Reserved ids never enter the index or the query sum, so a query
of purely unseen terms scores zero everywhere.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import corpus as cp
from .errors import ConfigError, DataError, ParseError

RESERVED_IDS = frozenset((cp.PAD, cp.UNK, cp.BOS, cp.EOS))


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ConfigError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ConfigError(f"b must be in [0, 1], got {self.b}")


@dataclass
class InvertedIndex:
    postings: dict[int, list[tuple[str, int]]]  # term id -> [(doc_id, tf)], doc_id ascending
    doc_len: dict[str, int]
    avgdl: float
    params: BM25Params = field(default_factory=BM25Params)

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    def doc_freq(self, term: int) -> int:
        return len(self.postings.get(term, ()))


def _indexable_ids(text: str, vocab: cp.Vocabulary) -> list[int]:
    return [i for i in cp.tokenize(text, vocab) if i not in RESERVED_IDS]


def build_index(
    store: cp.DocumentStore, vocab: cp.Vocabulary, params: BM25Params | None = None
) -> InvertedIndex:
    """Build term -> posting lists plus per-document length statistics."""
    if len(store) == 0:
        raise DataError("cannot build an index over an empty store")
    params = params or BM25Params()
    postings: dict[int, list[tuple[str, int]]] = {}
    doc_len: dict[str, int] = {}
    for doc in store:
        ids = _indexable_ids(doc.text, vocab)
        doc_len[doc.id] = len(ids)
        for term, tf in sorted(Counter(ids).items()):
            postings.setdefault(term, []).append((doc.id, tf))
    # Store order preserves insertion; postings must be sorted by doc id.
    for term in postings:
        postings[term].sort(key=lambda p: p[0])
    avgdl = sum(doc_len.values()) / len(doc_len)
    return InvertedIndex(postings=postings, doc_len=doc_len, avgdl=avgdl, params=params)


def idf(index: InvertedIndex, term: int) -> float:
    """log((N - n_t + 0.5) / (n_t + 0.5) + 1); strictly positive."""
    n_t = index.doc_freq(term)
    n = index.n_docs
    return math.log((n - n_t + 0.5) / (n_t + 0.5) + 1.0)


def _term_weight(index: InvertedIndex, term: int, tf: int, dl: int) -> float:
    k1, b = index.params.k1, index.params.b
    norm = tf + k1 * (1.0 - b + b * dl / index.avgdl)
    return idf(index, term) * tf * (k1 + 1.0) / norm


def bm25_score(index: InvertedIndex, query: cp.TokenSeq, doc_id: str) -> float:
    """Score one document against the query sequence."""
    if doc_id not in index.doc_len:
        raise DataError(f"unknown doc id {doc_id!r}")
    dl = index.doc_len[doc_id]
    tf_cache: dict[int, int] = {}
    score = 0.0
    for term in query:
        if term in RESERVED_IDS:
            continue
        if term not in tf_cache:
            tf_cache[term] = next(
                (tf for d, tf in index.postings.get(term, ()) if d == doc_id), 0
            )
        tf = tf_cache[term]
        if tf:
            score += _term_weight(index, term, tf, dl)
    return score


def search(
    index: InvertedIndex, query: cp.TokenSeq, top_k: int
) -> list[tuple[str, float]]:
    """Exact ranking by score descending, ties by doc id ascending.

    Only documents with a positive score are returned, so the result may be
    shorter than top_k.
    """
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    scores: dict[str, float] = {}
    # Accumulate in query-sequence order so floats match a per-document
    # rescoring loop bit for bit.
    for term in query:
        if term in RESERVED_IDS:
            continue
        for doc_id, tf in index.postings.get(term, ()):
            w = _term_weight(index, term, tf, index.doc_len[doc_id])
            scores[doc_id] = scores.get(doc_id, 0.0) + w
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k]


def mine_hard_negatives(
    index: InvertedIndex,
    doc: cp.Document,
    k: int,
    vocab: cp.Vocabulary,
    query_len: int = 512,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Top-k lexical neighbours of a document, using its own truncated text
    as the query and excluding the document itself.

    When fewer than k documents score positive, the list is padded with
    seeded random non-self ids so the contract |negatives| = k always holds.
    """
    if index.n_docs <= k:
        raise DataError(f"corpus of {index.n_docs} docs cannot supply {k} negatives")
    query = cp.truncate(cp.tokenize(doc.text, vocab), query_len)
    hits = [d for d, _ in search(index, query, k + 1) if d != doc.id][:k]
    if len(hits) < k:
        rng = rng if rng is not None else np.random.default_rng(0)
        pool = [d for d in sorted(index.doc_len) if d != doc.id and d not in hits]
        extra = rng.choice(len(pool), size=k - len(hits), replace=False)
        hits.extend(pool[i] for i in sorted(extra))
    return hits


def mine_all(
    store: cp.DocumentStore,
    index: InvertedIndex,
    k: int,
    vocab: cp.Vocabulary,
    query_len: int = 512,
    seed: int = 0,
) -> dict[str, list[str]]:
    """Mine negatives for every document, in store order."""
    out: dict[str, list[str]] = {}
    for i, doc in enumerate(store):
        rng = np.random.default_rng([seed, i])
        out[doc.id] = mine_hard_negatives(index, doc, k, vocab, query_len, rng)
    return out


def save_negatives(path: str, negatives: dict[str, list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, negs in negatives.items():
            f.write(json.dumps({"id": doc_id, "negatives": list(negs)}) + "\n")


def load_negatives(path: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})")
            if not isinstance(obj.get("id"), str) or not isinstance(obj.get("negatives"), list):
                raise ParseError(f"{path}:{lineno}: need string 'id' and list 'negatives'")
            out[obj["id"]] = [str(n) for n in obj["negatives"]]
    return out
