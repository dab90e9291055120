"""BM25 inverted index over chunks, plus the on-disk search artifact.

The index holds postings as CSR-style flat arrays so the scoring kernel
(numba or numpy, see kernels.py) can accumulate contributions without
touching Python objects. Scores use the Okapi BM25 form with the
non-negative IDF ln(1 + (N - df + 0.5) / (df + 0.5)).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Chunk, Document, IngestResult, Token, tokenize
from .kernels import bm25_accumulate

MAGIC = b"MIXIDX1\x00"


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError(f"k1 must be non-negative, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    bm25_score: float
    rank: int  # 1-based


@dataclass
class InvertedIndex:
    """Term -> postings map with the document statistics BM25 needs.

    Chunks are addressed internally by their position in ``chunk_ids``,
    which is sorted, so postings sorted by position are sorted by chunk_id.
    """

    chunk_ids: list[str]
    doc_lengths: np.ndarray  # int64 [N], tokens per chunk
    params: BM25Params
    terms: dict[str, int]  # term -> row in the CSR postings
    indptr: np.ndarray  # int64 [T+1]
    post_chunks: np.ndarray  # int32 [nnz], chunk positions, sorted per term
    post_tfs: np.ndarray  # int32 [nnz]
    avgdl: float = field(init=False)
    idf: np.ndarray = field(init=False)  # float64 [T]
    _pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.avgdl = float(np.mean(self.doc_lengths)) if len(self.chunk_ids) else 0.0
        n = np.float64(len(self.chunk_ids))
        df = np.diff(self.indptr).astype(np.float64)
        self.idf = np.log(1.0 + (n - df + 0.5) / (df + 0.5))
        self._pos = {cid: i for i, cid in enumerate(self.chunk_ids)}

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_ids)

    def chunk_position(self, chunk_id: str) -> int:
        try:
            return self._pos[chunk_id]
        except KeyError:
            raise KeyError(f"unknown chunk_ref: {chunk_id!r}") from None

    def postings(self, term: str) -> list[tuple[str, int]]:
        t = self.terms.get(term)
        if t is None:
            return []
        lo, hi = self.indptr[t], self.indptr[t + 1]
        return [
            (self.chunk_ids[c], int(f))
            for c, f in zip(self.post_chunks[lo:hi], self.post_tfs[lo:hi])
        ]

    def doc_length(self, chunk_id: str) -> int:
        return int(self.doc_lengths[self.chunk_position(chunk_id)])


def build_index(chunks: Sequence[Chunk], params: BM25Params | None = None) -> InvertedIndex:
    """Build the inverted index. Deterministic regardless of input order."""
    if not chunks:
        raise ValueError("cannot index an empty chunk collection")
    params = params or BM25Params()

    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    for a, b_ in zip(ordered, ordered[1:]):
        if a.chunk_id == b_.chunk_id:
            raise ValueError(f"duplicate chunk_id: {a.chunk_id!r}")

    doc_lengths = np.array([len(c.tokens) for c in ordered], dtype=np.int64)

    # term -> {chunk position -> tf}; dict order of terms fixed by sorting below
    tf_maps: dict[str, dict[int, int]] = {}
    for pos, chunk in enumerate(ordered):
        for tok in chunk.tokens:
            tf_maps.setdefault(tok.surface, {}).setdefault(pos, 0)
            tf_maps[tok.surface][pos] += 1

    terms = {t: i for i, t in enumerate(sorted(tf_maps))}
    indptr = np.zeros(len(terms) + 1, dtype=np.int64)
    chunks_out: list[np.ndarray] = []
    tfs_out: list[np.ndarray] = []
    for term, row in terms.items():
        entries = sorted(tf_maps[term].items())
        indptr[row + 1] = indptr[row] + len(entries)
        chunks_out.append(np.array([c for c, _ in entries], dtype=np.int32))
        tfs_out.append(np.array([f for _, f in entries], dtype=np.int32))

    return InvertedIndex(
        chunk_ids=[c.chunk_id for c in ordered],
        doc_lengths=doc_lengths,
        params=params,
        terms=terms,
        indptr=indptr,
        post_chunks=np.concatenate(chunks_out) if chunks_out else np.zeros(0, np.int32),
        post_tfs=np.concatenate(tfs_out) if tfs_out else np.zeros(0, np.int32),
    )


def _query_term_rows(index: InvertedIndex, query_tokens: Iterable[str]) -> np.ndarray:
    """Distinct known query terms, first-occurrence order (fixes fp sum order)."""
    rows = []
    seen = set()
    for tok in query_tokens:
        if tok in seen:
            continue
        seen.add(tok)
        row = index.terms.get(tok)
        if row is not None:
            rows.append(row)
    return np.array(rows, dtype=np.int64)


def score_all(index: InvertedIndex, query_tokens: Iterable[str]) -> np.ndarray:
    """BM25 scores of every chunk for the query, as a dense float64 array."""
    scores = np.zeros(index.n_chunks, dtype=np.float64)
    rows = _query_term_rows(index, query_tokens)
    if rows.size:
        bm25_accumulate(
            rows,
            index.indptr,
            index.post_chunks,
            index.post_tfs,
            index.idf,
            index.doc_lengths.astype(np.float64),
            index.avgdl,
            index.params.k1,
            index.params.b,
            scores,
        )
    return scores


def bm25_score(index: InvertedIndex, query_tokens: Iterable[str], chunk_ref: str) -> float:
    """Score one chunk against a query, straight from the closed form."""
    pos = index.chunk_position(chunk_ref)
    k1, b = index.params.k1, index.params.b
    dl = np.float64(index.doc_lengths[pos])
    score = np.float64(0.0)
    for row in _query_term_rows(index, query_tokens):
        lo, hi = index.indptr[row], index.indptr[row + 1]
        sub = index.post_chunks[lo:hi]
        k = np.searchsorted(sub, pos)
        if k == len(sub) or sub[k] != pos:
            continue
        tf = np.float64(index.post_tfs[lo + k])
        denom = tf + k1 * ((1.0 - b) + b * (dl / index.avgdl))
        score += (index.idf[row] * (tf * (k1 + 1.0))) / denom
    return float(score)


def retrieve_top_n(index: InvertedIndex, question: str, n: int) -> list[RetrievalHit]:
    """Top-n chunks by BM25, score descending, ties by ascending chunk_id.

    Chunks matching no query term (score 0) are never returned.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    query_tokens = [t.surface for t in tokenize(question)]
    scores = score_all(index, query_tokens)
    cand = np.nonzero(scores > 0.0)[0]
    if cand.size == 0:
        return []
    order = np.lexsort((cand, -scores[cand]))
    top = cand[order[:n]]
    return [
        RetrievalHit(chunk_id=index.chunk_ids[i], bm25_score=float(scores[i]), rank=r)
        for r, i in enumerate(top, 1)
    ]


# ---------------------------------------------------------------------------
# Persistence: one self-contained binary artifact per indexed corpus.
# Layout: magic "MIXIDX1\0" | header (G, S, k1, b, N) | document table |
# chunk table (tokens with char offsets) | postings | end marker.
# ---------------------------------------------------------------------------


@dataclass
class IndexArtifact:
    """Everything the query path needs: index, chunks and source documents.

    ``chunks[i]`` corresponds to ``index.chunk_ids[i]``.
    """

    granularity: int
    stride: int
    index: InvertedIndex
    documents: dict[str, Document]
    chunks: list[Chunk]

    def chunk_by_id(self, chunk_id: str) -> Chunk:
        return self.chunks[self.index.chunk_position(chunk_id)]

    def chunk_text(self, chunk: Chunk) -> str:
        return chunk.text(self.documents[chunk.doc_id].text)


def build_artifact(
    ingest: IngestResult, granularity: int, stride: int, params: BM25Params | None = None
) -> IndexArtifact:
    index = build_index(ingest.chunks, params)
    by_id = {c.chunk_id: c for c in ingest.chunks}
    return IndexArtifact(
        granularity=granularity,
        stride=stride,
        index=index,
        documents=ingest.documents,
        chunks=[by_id[cid] for cid in index.chunk_ids],
    )


def _wstr(out: list[bytes], s: str) -> None:
    raw = s.encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ValueError("truncated index file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def rstr(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def save_artifact(artifact: IndexArtifact, path: str | Path) -> None:
    idx = artifact.index
    out: list[bytes] = [MAGIC]
    out.append(
        struct.pack(
            "<IIddQ",
            artifact.granularity,
            artifact.stride,
            idx.params.k1,
            idx.params.b,
            idx.n_chunks,
        )
    )

    doc_ids = list(artifact.documents)
    doc_pos = {d: i for i, d in enumerate(doc_ids)}
    out.append(struct.pack("<Q", len(doc_ids)))
    for did in doc_ids:
        doc = artifact.documents[did]
        _wstr(out, doc.doc_id)
        _wstr(out, doc.title)
        _wstr(out, doc.text)

    out.append(struct.pack("<Q", len(artifact.chunks)))
    for chunk in artifact.chunks:
        _wstr(out, chunk.chunk_id)
        out.append(struct.pack("<IQQ", doc_pos[chunk.doc_id], chunk.window_start, len(chunk.tokens)))
        for tok in chunk.tokens:
            _wstr(out, tok.surface)
            out.append(struct.pack("<II", tok.char_start, tok.char_end))

    out.append(struct.pack("<Q", len(idx.terms)))
    for term, row in idx.terms.items():
        _wstr(out, term)
        lo, hi = int(idx.indptr[row]), int(idx.indptr[row + 1])
        out.append(struct.pack("<Q", hi - lo))
        out.append(idx.post_chunks[lo:hi].astype("<i4").tobytes())
        out.append(idx.post_tfs[lo:hi].astype("<i4").tobytes())

    Path(path).write_bytes(b"".join(out))


def load_artifact(path: str | Path) -> IndexArtifact:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a MIXIDX1 index file (bad magic/version)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    granularity, stride, k1, b, n_chunks = r.unpack("<IIddQ")

    (n_docs,) = r.unpack("<Q")
    documents: dict[str, Document] = {}
    doc_ids: list[str] = []
    for _ in range(n_docs):
        did, title, text = r.rstr(), r.rstr(), r.rstr()
        documents[did] = Document(did, title, text)
        doc_ids.append(did)

    (n,) = r.unpack("<Q")
    if n != n_chunks:
        raise ValueError(f"{path}: header N={n_chunks} but chunk table has {n}")
    chunks: list[Chunk] = []
    for _ in range(n):
        cid = r.rstr()
        doc_i, window_start, ntok = r.unpack("<IQQ")
        toks = []
        for _ in range(ntok):
            surf = r.rstr()
            cs, ce = r.unpack("<II")
            toks.append(Token(surf, cs, ce))
        chunks.append(Chunk(cid, doc_ids[doc_i], int(window_start), tuple(toks)))

    (n_terms,) = r.unpack("<Q")
    terms: dict[str, int] = {}
    indptr = np.zeros(n_terms + 1, dtype=np.int64)
    pc: list[np.ndarray] = []
    pt: list[np.ndarray] = []
    for row in range(n_terms):
        term = r.rstr()
        (cnt,) = r.unpack("<Q")
        terms[term] = row
        indptr[row + 1] = indptr[row] + cnt
        pc.append(np.frombuffer(r.take(4 * cnt), dtype="<i4").astype(np.int32))
        pt.append(np.frombuffer(r.take(4 * cnt), dtype="<i4").astype(np.int32))

    index = InvertedIndex(
        chunk_ids=[c.chunk_id for c in chunks],
        doc_lengths=np.array([len(c.tokens) for c in chunks], dtype=np.int64),
        params=BM25Params(k1=k1, b=b),
        terms=terms,
        indptr=indptr,
        post_chunks=np.concatenate(pc) if pc else np.zeros(0, np.int32),
        post_tfs=np.concatenate(pt) if pt else np.zeros(0, np.int32),
    )
    return IndexArtifact(
        granularity=granularity, stride=stride, index=index, documents=documents, chunks=chunks
    )
