"""Document ingestion, tokenization and sliding-window chunking.

Documents arrive as JSONL ({"doc_id", "title", "text"}) or as SQuAD v1.1
JSON. They are cut into overlapping token windows ("chunks") which are the
unit of retrieval, re-ranking and span extraction everywhere downstream.
"""
from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True)
class Token:
    """A normalized token plus the character span it was cut from.

    The offsets always point into the *source* text, so any token run can be
    mapped back to the verbatim substring it came from.
    """

    surface: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str


@dataclass(frozen=True)
class Chunk:
    """A contiguous token window of a document; the retrieval unit."""

    chunk_id: str
    doc_id: str
    window_start: int  # index of tokens[0] in the parent document's tokens
    tokens: tuple[Token, ...]

    @property
    def char_start(self) -> int:
        return self.tokens[0].char_start

    @property
    def char_end(self) -> int:
        return self.tokens[-1].char_end

    def text(self, doc_text: str) -> str:
        return doc_text[self.char_start : self.char_end]

    def surfaces(self) -> list[str]:
        return [t.surface for t in self.tokens]


@dataclass(frozen=True)
class SquadAnswer:
    text: str
    answer_start: int


@dataclass(frozen=True)
class SquadEntry:
    question_id: str
    question: str
    context: str
    answers: tuple[SquadAnswer, ...]


@dataclass(frozen=True)
class SquadDataset:
    entries: tuple[SquadEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class CorpusStats:
    n_documents: int
    n_chunks: int
    mean_chunk_tokens: float


@dataclass(frozen=True)
class IngestResult:
    documents: dict[str, Document]
    chunks: list[Chunk]
    stats: CorpusStats


def _normalize(s: str) -> str:
    return unicodedata.normalize("NFC", s.lower())


def tokenize(text: str) -> list[Token]:
    """Split on whitespace and punctuation; punctuation becomes its own token.

    Surfaces are lowercased NFC; offsets index the original string, so
    ``normalize(text[t.char_start:t.char_end]) == t.surface`` for every token.
    """
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            tokens.append(Token(_normalize(text[i:j]), i, j))
            i = j
        else:
            tokens.append(Token(_normalize(ch), i, i + 1))
            i += 1
    return tokens


def make_chunk_id(doc_id: str, window_start: int) -> str:
    # zero-padded so lexicographic order of ids == numeric window order per doc
    return f"{doc_id}:{window_start:08d}"


def chunk_document(doc: Document, granularity: int, stride: int) -> list[Chunk]:
    """Cut a document into token windows of size ``granularity`` every ``stride``.

    Windows start at 0, S, 2S, ...; emission stops with the first window that
    reaches the document's final token, so every token is covered and no
    window is fully contained in the previous one.
    """
    if stride <= 0 or granularity <= 0:
        raise ValueError(f"granularity and stride must be positive, got G={granularity} S={stride}")
    if stride > granularity:
        raise ValueError(f"stride must not exceed granularity, got G={granularity} S={stride}")
    toks = tokenize(doc.text)
    if not toks:
        return []
    chunks: list[Chunk] = []
    start = 0
    while True:
        end = min(start + granularity, len(toks))
        chunks.append(
            Chunk(
                chunk_id=make_chunk_id(doc.doc_id, start),
                doc_id=doc.doc_id,
                window_start=start,
                tokens=tuple(toks[start:end]),
            )
        )
        if end == len(toks):
            break
        start += stride
    return chunks


def load_squad(path: str | Path) -> SquadDataset:
    """Load a SQuAD v1.1 JSON file, validating every answer offset.

    Raises ValueError naming the offending question_id when an answer_start
    does not point at its answer text.
    """
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    entries: list[SquadEntry] = []
    for article in raw["data"]:
        for para in article["paragraphs"]:
            context = para["context"]
            for qa in para["qas"]:
                qid = str(qa["id"])
                answers = []
                for ans in qa["answers"]:
                    text_, start = ans["text"], int(ans["answer_start"])
                    if context[start : start + len(text_)] != text_:
                        raise ValueError(
                            f"question {qid}: answer_start {start} does not match "
                            f"answer text {text_!r}"
                        )
                    answers.append(SquadAnswer(text_, start))
                entries.append(SquadEntry(qid, qa["question"], context, tuple(answers)))
    return SquadDataset(tuple(entries))


def read_jsonl_documents(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON line: {e}") from e
            docs.append(Document(str(obj["doc_id"]), str(obj.get("title", "")), str(obj["text"])))
    return docs


def ingest_corpus(
    paths: Iterable[str | Path] | Sequence[Document],
    granularity: int,
    stride: int,
) -> IngestResult:
    """Read documents, chunk them, and return chunks plus corpus statistics.

    Accepts either JSONL file paths or already-built Document objects.
    Chunk order is deterministic: (doc_id, window_start) ascending.
    """
    docs: list[Document] = []
    for item in paths:
        if isinstance(item, Document):
            docs.append(item)
        else:
            docs.extend(read_jsonl_documents(item))

    by_id: dict[str, Document] = {}
    for doc in sorted(docs, key=lambda d: d.doc_id):
        if doc.doc_id in by_id:
            raise ValueError(f"duplicate doc_id: {doc.doc_id!r}")
        if not doc.text:
            raise ValueError(f"document {doc.doc_id!r} has empty text")
        by_id[doc.doc_id] = doc

    chunks: list[Chunk] = []
    for doc in by_id.values():
        chunks.extend(chunk_document(doc, granularity, stride))

    total_tokens = sum(len(c.tokens) for c in chunks)
    mean_len = total_tokens / len(chunks) if chunks else 0.0
    stats = CorpusStats(n_documents=len(by_id), n_chunks=len(chunks), mean_chunk_tokens=mean_len)
    return IngestResult(documents=by_id, chunks=chunks, stats=stats)
