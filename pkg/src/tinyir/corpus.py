"""Document ingestion, deterministic word-level vocabulary, tokenization.

Tokens are lowercased runs of word characters (letters, digits, underscore);
everything else is a boundary. Four reserved ids occupy the lowest slots and
every tokenized sequence ends in EOS, so the pooling position downstream is
always well defined, even for empty text.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ConflictError, ConfigError, ParseError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

_WORD_RE = re.compile(r"\w+")

TokenSeq = list[int]


def split_text(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    text: str


class DocumentStore:
    """Ordered, id-unique collection of documents. Immutable once built."""

    def __init__(self, docs: Iterable[Document] = ()):
        self._docs: list[Document] = []
        self._by_id: dict[str, Document] = {}
        for d in docs:
            self.add(d)

    def add(self, doc: Document) -> None:
        if not doc.id:
            raise ParseError("document id must be nonempty")
        if doc.id in self._by_id:
            raise ConflictError(f"duplicate document id {doc.id!r}")
        self._by_id[doc.id] = doc
        self._docs.append(doc)

    def get(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    def ids(self) -> list[str]:
        return [d.id for d in self._docs]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def save_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for d in self._docs:
                f.write(json.dumps({"id": d.id, "text": d.text}, ensure_ascii=False))
                f.write("\n")


def ingest_jsonl(path: str) -> DocumentStore:
    """Load a JSONL corpus of {"id", "text"} objects, preserving file order.

    Raises ParseError naming the offending line, ConflictError on duplicate
    ids.
    """
    store = DocumentStore()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected an object")
            if "id" not in obj or not isinstance(obj["id"], str):
                raise ParseError(f"line {lineno}: missing string field 'id'")
            if "text" not in obj or not isinstance(obj["text"], str):
                raise ParseError(f"line {lineno}: missing string field 'text'")
            store.add(Document(id=obj["id"], text=obj["text"]))
    return store


class Vocabulary:
    """token <-> id bijection with the four reserved ids up front."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self._token_to_id) != len(tokens):
            raise ConflictError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def __len__(self) -> int:
        return self.size

    def token_to_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def id_to_token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def save(self, path: str) -> None:
        # One token per line; line number = id.
        with open(path, "w", encoding="utf-8") as f:
            for t in self._id_to_token:
                f.write(t)
                f.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return cls(tokens)


def build_vocab(store: DocumentStore, max_size: int, min_freq: int = 1) -> Vocabulary:
    """Most frequent surface tokens, ties broken lexicographically.

    Deterministic for a fixed store. max_size includes the four reserved
    slots, so it must be at least 4.
    """
    if max_size < 4:
        raise ConfigError(f"max_size must be >= 4, got {max_size}")
    if min_freq < 1:
        raise ConfigError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    for doc in store:
        counts.update(split_text(doc.text))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )[: max_size - 4]
    return Vocabulary(list(RESERVED_TOKENS) + kept)


def tokenize(text: str, vocab: Vocabulary) -> TokenSeq:
    """Map text to ids, unknowns to UNK, and append EOS. Empty text -> [EOS]."""
    return [vocab.token_to_id(t) for t in split_text(text)] + [EOS]


def detokenize(ids: TokenSeq, vocab: Vocabulary) -> str:
    """Inverse of tokenize up to casefolding; reserved markers are dropped,
    UNK is rendered literally."""
    out = []
    for i in ids:
        if i in (PAD, BOS, EOS):
            continue
        out.append(vocab.id_to_token(i))
    return " ".join(out)


def truncate(seq: TokenSeq, max_len: int) -> TokenSeq:
    """Keep the first max_len-1 content ids and re-append EOS.

    Sequences already within the limit are returned unchanged; the result
    always ends in EOS.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    if len(seq) <= max_len:
        return seq
    return seq[: max_len - 1] + [EOS]


def content_ids(seq: TokenSeq) -> TokenSeq:
    """Strip the trailing EOS (and any reserved padding) off a sequence."""
    return [i for i in seq if i not in (PAD, BOS, EOS)]
