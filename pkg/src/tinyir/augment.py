"""Contrastive pair construction from unlabeled text.

Crop mode pairs a short random crop of a document (query-prefixed) with an
independent random crop of the same document (passage-prefixed). Dropout
mode feeds the same truncated document to both sides and relies on dropout
noise inside the model's forward pass to separate the two views. Mined hard
negatives ride along as passage-prefixed truncations in either mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .corpus import (EOS, Document, DocumentStore, TokenSeq, Vocabulary, content_ids,
                     split_text, tokenize)
from .errors import ConfigError, DataError

CROP = "crop"
DROPOUT = "dropout"


@dataclass(frozen=True)
class AugmentationConfig:
    mode: str = CROP
    anchor_len: int = 64
    passage_len: int = 512
    k_negatives: int = 7
    query_prefix: str = "Query: "
    passage_prefix: str = "Passage: "
    seed: int = 0
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.mode not in (CROP, DROPOUT):
            raise ConfigError(f"augmentation mode must be crop or dropout, got {self.mode!r}")
        if self.anchor_len < 1:
            raise ConfigError(f"anchor_len must be >= 1, got {self.anchor_len}")
        if self.passage_len < self.anchor_len:
            raise ConfigError(f"passage_len {self.passage_len} < anchor_len {self.anchor_len}")
        if self.k_negatives < 0:
            raise ConfigError(f"k_negatives must be >= 0, got {self.k_negatives}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass(frozen=True)
class TrainingPair:
    source_id: str
    anchor: TokenSeq
    positive: TokenSeq
    negatives: tuple[TokenSeq, ...]


def random_crop(doc_tokens: TokenSeq, length: int, rng: np.random.Generator) -> TokenSeq:
    """A contiguous span of exactly `length` tokens (the whole document when
    it is shorter), start offset uniform, EOS appended."""
    if length < 1:
        raise ConfigError(f"crop length must be >= 1, got {length}")
    n = len(doc_tokens)
    if n <= length:
        return list(doc_tokens) + [EOS]
    start = int(rng.integers(0, n - length + 1))
    return list(doc_tokens[start:start + length]) + [EOS]


def _passage(body: TokenSeq, prefix: TokenSeq, passage_len: int) -> TokenSeq:
    return prefix + list(body[:passage_len]) + [EOS]


class PairBuilder:
    """Caches tokenized prefixes and document content for one (store, vocab)."""

    def __init__(self, store: DocumentStore, vocab: Vocabulary, cfg: AugmentationConfig):
        self.store = store
        self.vocab = vocab
        self.cfg = cfg
        self.query_prefix = tokenize_prefix(cfg.query_prefix, vocab)
        self.passage_prefix = tokenize_prefix(cfg.passage_prefix, vocab)
        self._content: dict[str, TokenSeq] = {}

    def content(self, doc_id: str) -> TokenSeq:
        if doc_id not in self._content:
            self._content[doc_id] = content_ids(tokenize(self.store.get(doc_id).text, self.vocab))
        return self._content[doc_id]

    def make_pair(self, doc: Document, negative_ids: list[str],
                  rng: np.random.Generator) -> TrainingPair:
        cfg = self.cfg
        body = self.content(doc.id)
        if not body:
            raise DataError(f"document {doc.id!r} has no content tokens")
        if len(negative_ids) < cfg.k_negatives:
            raise DataError(f"document {doc.id!r} has {len(negative_ids)} mined negatives, "
                            f"needs {cfg.k_negatives}")
        if cfg.mode == CROP:
            anchor = self.query_prefix + random_crop(body, cfg.anchor_len, rng)
            positive = self.passage_prefix + random_crop(body, cfg.passage_len, rng)
        else:
            # Both views are the same truncated document; the only thing
            # separating them is dropout noise inside the forward pass.
            anchor = _passage(body, self.query_prefix, cfg.passage_len)
            positive = _passage(body, self.passage_prefix, cfg.passage_len)
        negatives = tuple(
            _passage(self.content(nid), self.passage_prefix, cfg.passage_len)
            for nid in negative_ids[:cfg.k_negatives]
        )
        return TrainingPair(source_id=doc.id, anchor=anchor,
                            positive=positive, negatives=negatives)


def tokenize_prefix(prefix: str, vocab: Vocabulary) -> TokenSeq:
    """Token ids for an instruction prefix, without EOS."""
    return [vocab.token_to_id(t) for t in split_text(prefix)]


def make_pair(doc: Document, negative_ids: list[str], cfg: AugmentationConfig,
              rng: np.random.Generator, store: DocumentStore,
              vocab: Vocabulary) -> TrainingPair:
    return PairBuilder(store, vocab, cfg).make_pair(doc, negative_ids, rng)


def build_batches(store: DocumentStore, vocab: Vocabulary,
                  negatives: Mapping[str, list[str]], cfg: AugmentationConfig,
                  batch_size: int, epoch: int = 0) -> Iterator[list[TrainingPair]]:
    """One pair per document, order shuffled by (seed, epoch), short tail
    batch included. Per-document crop rngs are keyed by position in the store
    so two runs over the same corpus draw identical offsets."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    builder = PairBuilder(store, vocab, cfg)
    docs = list(store)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(docs))
    batch: list[TrainingPair] = []
    for idx in order:
        doc = docs[int(idx)]
        if doc.id not in negatives:
            raise DataError(f"no mined negatives for document {doc.id!r}")
        rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
        batch.append(builder.make_pair(doc, negatives[doc.id], rng))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def dump_pairs(pairs, path: str) -> None:
    """JSONL dump for eyeballing what the model actually trains on."""
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({
                "source_id": p.source_id,
                "anchor": list(p.anchor),
                "positive": list(p.positive),
                "negatives": [list(n) for n in p.negatives],
            }) + "\n")
