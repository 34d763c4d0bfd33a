"""BM25 index, scoring, search, and hard-negative mining.

The scoring tests compare against a brute-force implementation written
directly from the formula, with no inverted index and no shared code.
"""

import math

import numpy as np
import pytest

from tinyir.corpus import Document, DocumentStore, build_vocab, tokenize
from tinyir.errors import DataError
from tinyir.sparse import (bm25_score, build_index, idf, load_negatives,
                           mine_all, mine_hard_negatives, save_negatives,
                           search)


def brute_force_scores(store, vocab, query_ids, k1=1.2, b=0.75):
    """Independent BM25 oracle: a double loop over (query term, document),
    recounting term frequencies from the raw token lists every time."""
    doc_tokens = {}
    for doc in store:
        ids = tokenize(doc.text, vocab)[:-1]  # strip EOS
        doc_tokens[doc.id] = [t for t in ids if t > 3]
    n = len(doc_tokens)
    avgdl = sum(len(v) for v in doc_tokens.values()) / n
    scores = {}
    for doc_id, toks in doc_tokens.items():
        s = 0.0
        for q in query_ids:
            if q <= 3:
                continue
            tf = toks.count(q)
            if tf == 0:
                continue
            n_t = sum(1 for other in doc_tokens.values() if q in other)
            w = math.log((n - n_t + 0.5) / (n_t + 0.5) + 1.0)
            s += w * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(toks) / avgdl))
        scores[doc_id] = s
    return scores


def random_store(rng, n_docs, max_len=50, vocab_words=30):
    words = [f"v{i}" for i in range(vocab_words)]
    docs = []
    for i in range(n_docs):
        length = int(rng.integers(1, max_len + 1))
        text = " ".join(words[int(j)] for j in rng.integers(0, vocab_words, length))
        docs.append(Document(id=f"d{i:03d}", text=text))
    return DocumentStore(docs)


class TestIndexConstruction:
    def test_single_doc_counts(self):
        """'a b a' gives postings a->tf 2, b->tf 1, avgdl 3."""
        store = DocumentStore([Document(id="d", text="a b a")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        a, b = vocab.token_to_id("a"), vocab.token_to_id("b")
        assert index.postings[a] == [("d", 2)]
        assert index.postings[b] == [("d", 1)]
        assert index.avgdl == 3.0
        assert index.n_docs == 1

    def test_identical_docs_symmetry(self):
        store = DocumentStore([Document(id=f"d{i}", text="x y z") for i in range(3)])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        for term, postings in index.postings.items():
            assert len(postings) == 3 == index.n_docs

    def test_empty_store_rejected(self):
        store = DocumentStore([])
        vocab = build_vocab(DocumentStore([Document(id="d", text="a")]), 10)
        with pytest.raises(DataError):
            build_index(store, vocab)

    def test_statistics_match_naive_recount(self):
        rng = np.random.default_rng(7)
        store = random_store(rng, 50)
        vocab = build_vocab(store, 500)
        index = build_index(store, vocab)
        doc_tokens = {d.id: [t for t in tokenize(d.text, vocab)[:-1] if t > 3]
                      for d in store}
        assert index.n_docs == 50
        assert index.avgdl == pytest.approx(
            sum(len(v) for v in doc_tokens.values()) / 50)
        for term, postings in index.postings.items():
            assert postings == sorted(postings)
            for doc_id, tf in postings:
                assert tf == doc_tokens[doc_id].count(term)
                assert tf >= 1
        for doc_id, toks in doc_tokens.items():
            for t in set(toks):
                assert any(d == doc_id for d, _ in index.postings[t])

    def test_reserved_ids_never_indexed(self):
        store = DocumentStore([Document(id="d", text="a b")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert all(term > 3 for term in index.postings)


def df_ladder_index():
    """Corpus of 8 docs where term 'm<k>' appears in exactly k of them."""
    docs = []
    for i in range(8):
        words = [f"m{k}" for k in range(1, 9) if i < k]
        docs.append(Document(id=f"d{i}", text=" ".join(words)))
    store = DocumentStore(docs)
    vocab = build_vocab(store, 50)
    return store, vocab, build_index(store, vocab)


class TestIdf:
    def test_unseen_term_closed_form(self):
        """N=10 with n_t=0 gives log((10.5/0.5) + 1) = log 22."""
        store = DocumentStore([Document(id=f"d{i}", text="a") for i in range(10)])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert idf(index, 9999) == pytest.approx(math.log(22.0), abs=1e-9)

    def test_ubiquitous_term_closed_form(self):
        store = DocumentStore([Document(id=f"d{i}", text="a") for i in range(10)])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        a = vocab.token_to_id("a")
        assert idf(index, a) == pytest.approx(math.log(0.5 / 10.5 + 1.0), abs=1e-9)
        assert idf(index, a) == pytest.approx(0.046520, abs=1e-6)

    def test_positive_and_decreasing_in_df(self):
        _, vocab, index = df_ladder_index()
        values = [idf(index, vocab.token_to_id(f"m{k}")) for k in range(1, 9)]
        assert all(v > 0 for v in values)
        assert all(a > b for a, b in zip(values, values[1:]))


class TestScoring:
    def test_no_overlap_scores_zero(self):
        store = DocumentStore([Document(id="d", text="a b c")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert bm25_score(index, [9999], "d") == 0.0

    def test_single_doc_length_norm_collapses(self):
        """With one document, |d| = avgdl, so the length normalization and
        the saturation term cancel and the score reduces to idf alone."""
        store = DocumentStore([Document(id="d", text="a b")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        a = vocab.token_to_id("a")
        assert bm25_score(index, [a], "d") == pytest.approx(idf(index, a), abs=1e-9)
        assert idf(index, a) == pytest.approx(math.log(4.0 / 3.0), abs=1e-9)

    def test_repeated_query_terms_count_per_occurrence(self):
        store = DocumentStore([Document(id="d", text="a b")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        a = vocab.token_to_id("a")
        assert bm25_score(index, [a, a], "d") == pytest.approx(
            2.0 * bm25_score(index, [a], "d"), abs=1e-12)

    def test_monotone_in_term_frequency(self):
        """For equal-length docs the score rises with the term count."""
        store = DocumentStore([Document(id="lo", text="q x x x"),
                               Document(id="hi", text="q q q x")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        q = vocab.token_to_id("q")
        assert bm25_score(index, [q], "hi") > bm25_score(index, [q], "lo")

    def test_unknown_doc_rejected(self):
        store = DocumentStore([Document(id="d", text="a")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        with pytest.raises(DataError):
            bm25_score(index, [vocab.token_to_id("a")], "nope")

    def test_matches_brute_force_on_random_corpora(self):
        rng = np.random.default_rng(11)
        for trial in range(5):
            store = random_store(rng, 20)
            vocab = build_vocab(store, 500)
            index = build_index(store, vocab)
            for _ in range(10):
                qlen = int(rng.integers(1, 8))
                query = [int(t) for t in rng.integers(4, len(vocab), qlen)]
                expected = brute_force_scores(store, vocab, query)
                for doc in store:
                    assert bm25_score(index, query, doc.id) == pytest.approx(
                        expected[doc.id], abs=1e-9)


class TestSearch:
    def test_unseen_terms_give_empty_ranking(self):
        store = DocumentStore([Document(id="d", text="a")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert search(index, [9999], 5) == []

    def test_unique_match_ranks_first(self):
        store = DocumentStore([Document(id="d0", text="x y"),
                               Document(id="d1", text="x z"),
                               Document(id="d2", text="x w")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        ranking = search(index, [vocab.token_to_id("z")], 3)
        assert ranking[0][0] == "d1"
        assert len(ranking) == 1  # only one positive score

    def test_exact_ties_break_by_doc_id(self):
        store = DocumentStore([Document(id="b", text="t u"),
                               Document(id="a", text="t v"),
                               Document(id="c", text="t w")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        ranking = search(index, [vocab.token_to_id("t")], 3)
        assert [doc_id for doc_id, _ in ranking] == ["a", "b", "c"]
        assert len({s for _, s in ranking}) == 1

    def test_top_k_truncates(self):
        store = DocumentStore([Document(id=f"d{i}", text="t") for i in range(5)])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert len(search(index, [vocab.token_to_id("t")], 2)) == 2

    def test_agrees_with_brute_force_ranking(self):
        rng = np.random.default_rng(23)
        for trial in range(5):
            store = random_store(rng, 30)
            vocab = build_vocab(store, 500)
            index = build_index(store, vocab)
            query = [int(t) for t in rng.integers(4, len(vocab), 5)]
            expected = brute_force_scores(store, vocab, query)
            want = sorted(((d, s) for d, s in expected.items() if s > 0),
                          key=lambda kv: (-kv[1], kv[0]))
            got = search(index, query, len(expected))
            assert [d for d, _ in got] == [d for d, _ in want]
            for (gd, gs), (wd, ws) in zip(got, want):
                assert gs == pytest.approx(ws, abs=1e-9)


class TestMining:
    def test_two_doc_corpus_returns_the_other(self):
        store = DocumentStore([Document(id="d0", text="a b"),
                               Document(id="d1", text="a c")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        assert mine_hard_negatives(index, store.get("d0"), 1, vocab) == ["d1"]
        assert mine_hard_negatives(index, store.get("d1"), 1, vocab) == ["d0"]

    def test_corpus_not_larger_than_k_rejected(self):
        store = DocumentStore([Document(id="d0", text="a"),
                               Document(id="d1", text="b")])
        vocab = build_vocab(store, 10)
        index = build_index(store, vocab)
        with pytest.raises(DataError):
            mine_hard_negatives(index, store.get("d0"), 2, vocab)

    def test_never_returns_self_and_never_duplicates(self):
        rng = np.random.default_rng(3)
        store = random_store(rng, 25)
        vocab = build_vocab(store, 500)
        index = build_index(store, vocab)
        negatives = mine_all(store, index, 7, vocab, seed=5)
        assert set(negatives) == set(store.ids())
        for doc_id, ids in negatives.items():
            assert doc_id not in ids
            assert len(ids) == 7
            assert len(set(ids)) == 7

    def test_padding_kicks_in_for_isolated_documents(self):
        """A document sharing no vocabulary with the rest still gets K
        negatives, drawn deterministically from the other ids."""
        docs = [Document(id="iso", text="qq zz")]
        docs += [Document(id=f"d{i}", text="a b c") for i in range(6)]
        store = DocumentStore(docs)
        vocab = build_vocab(store, 50)
        index = build_index(store, vocab)
        first = mine_hard_negatives(index, store.get("iso"), 4, vocab,
                                    rng=np.random.default_rng(9))
        second = mine_hard_negatives(index, store.get("iso"), 4, vocab,
                                     rng=np.random.default_rng(9))
        assert first == second
        assert len(first) == 4
        assert "iso" not in first

    def test_mine_all_deterministic(self):
        rng = np.random.default_rng(31)
        store = random_store(rng, 15)
        vocab = build_vocab(store, 500)
        index = build_index(store, vocab)
        assert mine_all(store, index, 5, vocab, seed=2) == \
            mine_all(store, index, 5, vocab, seed=2)

    def test_negatives_file_round_trip(self, tmp_path):
        negatives = {"d0": ["d1", "d2"], "d1": ["d0", "d2"]}
        path = str(tmp_path / "negatives.jsonl")
        save_negatives(path, negatives)
        assert load_negatives(path) == negatives
