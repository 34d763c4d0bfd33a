"""Dense retrieval over a trained encoder: embed the corpus once, serve
exact cosine top-k, score runs with nDCG/Recall/MRR, and read/write the
usual evaluation artifacts (qrels TSV, TREC run files, query JSONL).

Search is exhaustive by design; corpora here are thousands of documents,
not millions, and an exact scan doubles as its own oracle.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .augment import tokenize_prefix
from .corpus import EOS, DocumentStore, TokenSeq, Vocabulary, content_ids, tokenize
from .errors import ConfigError, DataError, ParseError
from .model import ModelConfig, ModelParams, checkpoint_fingerprint, serialize_checkpoint
from .model import embed_eos
from .sparse import InvertedIndex
from .sparse import search as bm25_search

INDEX_MAGIC = b"L2IX"
INDEX_VERSION = 1

Qrels = dict[str, dict[str, int]]
RetrievalRun = dict[str, list[tuple[str, float]]]


@dataclass
class EmbeddingIndex:
    doc_ids: list[str]
    vectors: np.ndarray
    fingerprint: str = ""

    def validate(self) -> None:
        if self.vectors.ndim != 2 or len(self.doc_ids) != self.vectors.shape[0]:
            raise DataError(f"{len(self.doc_ids)} ids for vector matrix "
                            f"of shape {self.vectors.shape}")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise DataError("duplicate doc ids in embedding index")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.shape[0] and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise DataError("embedding index rows are not unit-normalized")

    def __len__(self) -> int:
        return len(self.doc_ids)


def save_index(path: str, index: EmbeddingIndex) -> None:
    index.validate()
    out = [INDEX_MAGIC, struct.pack("<I", INDEX_VERSION)]
    fp = index.fingerprint.encode("utf-8")
    out.append(struct.pack("<I", len(fp)))
    out.append(fp)
    n, d = index.vectors.shape
    out.append(struct.pack("<II", n, d))
    for doc_id in index.doc_ids:
        b = doc_id.encode("utf-8")
        out.append(struct.pack("<I", len(b)))
        out.append(b)
    out.append(index.vectors.astype("<f4", copy=False).tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(out))
    os.replace(tmp, path)


def load_index(path: str) -> EmbeddingIndex:
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    if bytes(view[:4]) != INDEX_MAGIC:
        raise DataError("not an embedding index (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != INDEX_VERSION:
        raise DataError(f"unsupported index version {version}")
    (flen,) = struct.unpack_from("<I", view, off)
    off += 4
    fingerprint = bytes(view[off:off + flen]).decode("utf-8")
    off += flen
    n, d = struct.unpack_from("<II", view, off)
    off += 8
    doc_ids = []
    for _ in range(n):
        (ilen,) = struct.unpack_from("<I", view, off)
        off += 4
        doc_ids.append(bytes(view[off:off + ilen]).decode("utf-8"))
        off += ilen
    vectors = np.frombuffer(view, dtype="<f4", count=n * d, offset=off).reshape(n, d).copy()
    index = EmbeddingIndex(doc_ids=doc_ids, vectors=vectors, fingerprint=fingerprint)
    index.validate()
    return index


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def _prefixed_sequence(text: str, prefix_ids: TokenSeq, vocab: Vocabulary,
                       max_len: int) -> TokenSeq:
    """prefix + truncated body + EOS, never longer than max_len."""
    budget = max_len - len(prefix_ids) - 1
    if budget < 1:
        raise ConfigError(f"max_len {max_len} leaves no room for text after "
                          f"a {len(prefix_ids)}-token prefix")
    body = content_ids(tokenize(text, vocab))
    return prefix_ids + body[:budget] + [EOS]


def embed_text(text: str, prefix: str, params: ModelParams, cfg: ModelConfig,
               vocab: Vocabulary, max_len: int) -> np.ndarray:
    seq = _prefixed_sequence(text, tokenize_prefix(prefix, vocab), vocab, max_len)
    return embed_eos(seq, params, cfg).data[0]


def corpus_sequences(store: DocumentStore, vocab: Vocabulary, max_len: int,
                     prefix: str = "Passage: ") -> tuple[list[str], list[TokenSeq]]:
    """The exact token sequences embed_corpus feeds the model, in store
    order; callers comparing two models can hash these to prove both saw
    identical inputs."""
    prefix_ids = tokenize_prefix(prefix, vocab)
    ids = []
    seqs = []
    for doc in store:
        ids.append(doc.id)
        seqs.append(_prefixed_sequence(doc.text, prefix_ids, vocab, max_len))
    return ids, seqs


def embed_sequences(params: ModelParams, cfg: ModelConfig, ids: list[str],
                    seqs: list[TokenSeq], fingerprint: str | None = None) -> EmbeddingIndex:
    rows = [embed_eos(seq, params, cfg).data[0] for seq in seqs]
    if fingerprint is None:
        fingerprint = checkpoint_fingerprint(serialize_checkpoint(params, cfg))
    vectors = np.stack(rows).astype(np.float32) if rows else np.zeros((0, cfg.d_model),
                                                                      dtype=np.float32)
    index = EmbeddingIndex(doc_ids=list(ids), vectors=vectors, fingerprint=fingerprint)
    index.validate()
    return index


def embed_corpus(params: ModelParams, cfg: ModelConfig, store: DocumentStore,
                 vocab: Vocabulary, max_len: int, prefix: str = "Passage: ",
                 fingerprint: str | None = None) -> EmbeddingIndex:
    """One unit row per document, in store order. Truncation happens here,
    before the model, so forward never sees an overlong sequence."""
    if max_len > cfg.max_context:
        raise ConfigError(f"max_len {max_len} exceeds model max_context {cfg.max_context}")
    ids, seqs = corpus_sequences(store, vocab, max_len, prefix)
    return embed_sequences(params, cfg, ids, seqs, fingerprint=fingerprint)


def search(index: EmbeddingIndex, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product (cosine on unit rows), ties broken by
    doc_id ascending; k larger than the corpus just returns everything."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    q = np.asarray(query_vec, dtype=index.vectors.dtype).reshape(-1)
    if q.shape[0] != index.vectors.shape[1]:
        raise DataError(f"query of dimension {q.shape[0]} against index "
                        f"of dimension {index.vectors.shape[1]}")
    scores = index.vectors @ q
    order = np.lexsort((np.asarray(index.doc_ids), -scores))
    return [(index.doc_ids[int(i)], float(scores[int(i)])) for i in order[:k]]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-query scores plus their mean; queries with no relevant document
    cannot be scored and are listed instead of silently averaged in."""

    per_query: dict[str, float] = field(default_factory=dict)
    no_relevant: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return float(sum(self.per_query.values()) / len(self.per_query))


def _relevant(qrels: Qrels, qid: str) -> dict[str, int]:
    if qid not in qrels:
        raise DataError(f"run contains query {qid!r} with no qrels entry")
    return {d: g for d, g in qrels[qid].items() if g > 0}


def _score_run(run: RetrievalRun, qrels: Qrels, score_one) -> MetricReport:
    report = MetricReport()
    for qid, ranking in run.items():
        rel = _relevant(qrels, qid)
        if not rel:
            report.no_relevant.append(qid)
            continue
        report.per_query[qid] = score_one(ranking, rel)
    return report


def ndcg_at_k(run: RetrievalRun, qrels: Qrels, k: int = 10) -> MetricReport:
    """Exponential gain (2^rel - 1), log2(rank+1) discount, ideal ranking
    from the sorted grades."""

    def one(ranking, rel):
        dcg = 0.0
        for rank, (doc_id, _) in enumerate(ranking[:k], start=1):
            grade = rel.get(doc_id, 0)
            if grade:
                dcg += (2.0 ** grade - 1.0) / math.log2(rank + 1)
        ideal = sorted(rel.values(), reverse=True)[:k]
        idcg = sum((2.0 ** g - 1.0) / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
        return dcg / idcg

    return _score_run(run, qrels, one)


def recall_at_k(run: RetrievalRun, qrels: Qrels, k: int = 10) -> MetricReport:
    def one(ranking, rel):
        hit = sum(1 for doc_id, _ in ranking[:k] if doc_id in rel)
        return hit / len(rel)

    return _score_run(run, qrels, one)


def mrr(run: RetrievalRun, qrels: Qrels, k: int = 10) -> MetricReport:
    def one(ranking, rel):
        for rank, (doc_id, _) in enumerate(ranking[:k], start=1):
            if doc_id in rel:
                return 1.0 / rank
        return 0.0

    return _score_run(run, qrels, one)


def expected_random_ndcg(n_docs: int, n_relevant: int, k: int = 10,
                         trials: int = 2000, seed: int = 0) -> float:
    """Simulated mean nDCG@k of a uniformly random ranking with binary
    grades; the analytic form is unpleasant, the simulation is cheap."""
    if not 0 < n_relevant <= n_docs:
        raise ConfigError("need 0 < n_relevant <= n_docs")
    rng = np.random.default_rng(seed)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(n_relevant, k) + 1))
    total = 0.0
    for _ in range(trials):
        positions = rng.choice(n_docs, size=n_relevant, replace=False) + 1
        total += sum(1.0 / math.log2(p + 1) for p in positions if p <= k) / ideal
    return total / trials


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def save_qrels(path: str, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in qrels:
            for doc_id, grade in qrels[qid].items():
                f.write(f"{qid}\t{doc_id}\t{grade}\n")


def load_qrels(path: str) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            qid, doc_id, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: grade {grade!r} is not an integer")
            if g < 0:
                raise ParseError(f"{path}:{lineno}: negative relevance grade")
            qrels.setdefault(qid, {})[doc_id] = g
    return qrels


def save_run(path: str, run: RetrievalRun, tag: str = "tinyir") -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in run:
            for rank, (doc_id, score) in enumerate(run[qid], start=1):
                f.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def load_run(path: str) -> RetrievalRun:
    run: RetrievalRun = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 whitespace-separated fields")
            qid, _, doc_id, rank, score, _ = parts
            ranking = run.setdefault(qid, [])
            if int(rank) != len(ranking) + 1:
                raise ParseError(f"{path}:{lineno}: ranks for {qid!r} are not "
                                 f"contiguous from 1")
            if any(d == doc_id for d, _ in ranking):
                raise ParseError(f"{path}:{lineno}: duplicate doc {doc_id!r} for {qid!r}")
            ranking.append((doc_id, float(score)))
    return run


def save_queries(path: str, queries: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, text in queries.items():
            f.write(json.dumps({"id": qid, "text": text}) + "\n")


def load_queries(path: str) -> dict[str, str]:
    queries: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: bad JSON: {e}")
            if not isinstance(obj.get("id"), str) or not isinstance(obj.get("text"), str):
                raise ParseError(f"{path}:{lineno}: need string fields 'id' and 'text'")
            if obj["id"] in queries:
                raise ParseError(f"{path}:{lineno}: duplicate query id {obj['id']!r}")
            queries[obj["id"]] = obj["text"]
    return queries


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------


def query_sequences(queries: dict[str, str], vocab: Vocabulary, max_len: int,
                    prefix: str = "Query: ") -> tuple[list[str], list[TokenSeq]]:
    prefix_ids = tokenize_prefix(prefix, vocab)
    qids = list(queries)
    seqs = [_prefixed_sequence(queries[q], prefix_ids, vocab, max_len) for q in qids]
    return qids, seqs


def run_queries(index: EmbeddingIndex, params: ModelParams, cfg: ModelConfig,
                vocab: Vocabulary, queries: dict[str, str], max_len: int,
                k: int, prefix: str = "Query: ") -> RetrievalRun:
    run: RetrievalRun = {}
    qids, seqs = query_sequences(queries, vocab, max_len, prefix)
    for qid, seq in zip(qids, seqs):
        run[qid] = search(index, embed_eos(seq, params, cfg).data[0], k)
    return run


def evaluate(params: ModelParams, cfg: ModelConfig, store: DocumentStore,
             vocab: Vocabulary, queries: dict[str, str], qrels: Qrels,
             max_len: int, k: int = 10, run_path: str | None = None,
             tag: str = "tinyir") -> tuple[dict, RetrievalRun]:
    """Embed, search, score. Returns a JSON-ready report and the run."""
    index = embed_corpus(params, cfg, store, vocab, max_len)
    run = run_queries(index, params, cfg, vocab, queries, max_len, k=max(k, 10))
    if run_path is not None:
        save_run(run_path, run, tag=tag)
    report = {}
    for name, metric in (("ndcg", ndcg_at_k), ("recall", recall_at_k), ("mrr", mrr)):
        m = metric(run, qrels, k)
        report[f"{name}_at_{k}"] = {
            "mean": m.mean,
            "per_query": m.per_query,
            "no_relevant": m.no_relevant,
        }
    return report, run


def bm25_run(index: InvertedIndex, vocab: Vocabulary, queries: dict[str, str],
             k: int = 10) -> RetrievalRun:
    """Sparse baseline producing the same run structure as the dense path."""
    run: RetrievalRun = {}
    for qid, text in queries.items():
        ids = content_ids(tokenize(text, vocab))
        run[qid] = bm25_search(index, ids, k)
    return run
