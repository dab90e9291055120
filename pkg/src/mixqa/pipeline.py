"""End-to-end answering: retrieve, re-rank and extract in one pass per chunk.

The final ranking is by the learned paragraph score alone (BM25 only breaks
ties); each returned answer carries its extracted span, recovered verbatim
from the source document via character offsets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SquadDataset, tokenize
from .encoder import ModelParameters, Vocab
from .evalkit import (
    MetricReport,
    _gold_answer_in_chunk,
    doc_id_by_context,
    exact_match,
    f1,
)
from .multitask import extract_span, forward_multitask
from .retriever import IndexArtifact, retrieve_top_n


@dataclass(frozen=True)
class RankedAnswer:
    rank: int
    answer_text: str
    chunk_id: str
    doc_id: str
    title: str
    paragraph_score: float
    span: tuple[int, int]
    span_score: float
    bm25_score: float
    context: str  # the chunk's text
    highlight: tuple[int, int]  # char offsets of the answer within context


def answer(
    question: str,
    n_retrieve: int,
    k: int,
    params: ModelParameters,
    vocab: Vocab,
    artifact: IndexArtifact,
    max_answer_len: int = 30,
    batch_size: int = 32,
) -> list[RankedAnswer]:
    """Top-k answers: retrieve n chunks, score and extract per chunk, rank by
    paragraph score (ties by BM25 score, then chunk_id)."""
    if k < 1 or n_retrieve < k:
        raise ValueError(f"need n_retrieve >= k >= 1, got n_retrieve={n_retrieve} k={k}")
    hits = retrieve_top_n(artifact.index, question, n_retrieve)
    if not hits:
        return []
    q_ids = vocab.encode(t.surface for t in tokenize(question))

    candidates = []
    for lo in range(0, len(hits), batch_size):
        batch = hits[lo : lo + batch_size]
        chunks = [artifact.chunk_by_id(h.chunk_id) for h in batch]
        out = forward_multitask(params, q_ids, [vocab.encode(c.surfaces()) for c in chunks])
        for i, (hit, chunk) in enumerate(zip(batch, chunks)):
            if out.packed[i].paragraph_len == 0:
                continue  # question left no room for paragraph tokens
            s, e, span_score = extract_span(out.start_logits[i], out.end_logits[i], max_answer_len)
            doc = artifact.documents[chunk.doc_id]
            a0, a1 = chunk.tokens[s].char_start, chunk.tokens[e].char_end
            candidates.append(
                dict(
                    hit=hit,
                    chunk=chunk,
                    doc=doc,
                    score=float(out.scores[i]),
                    span=(s, e),
                    span_score=span_score,
                    answer_text=doc.text[a0:a1],
                    highlight=(a0 - chunk.char_start, a1 - chunk.char_start),
                )
            )

    candidates.sort(key=lambda c: (-c["score"], -c["hit"].bm25_score, c["chunk"].chunk_id))

    results: list[RankedAnswer] = []
    seen: set[tuple[str, str]] = set()
    for c in candidates:
        key = (c["doc"].doc_id, c["answer_text"])
        if key in seen:  # overlapping windows yielding the same answer text
            continue
        seen.add(key)
        results.append(
            RankedAnswer(
                rank=len(results) + 1,
                answer_text=c["answer_text"],
                chunk_id=c["chunk"].chunk_id,
                doc_id=c["doc"].doc_id,
                title=c["doc"].title,
                paragraph_score=c["score"],
                span=c["span"],
                span_score=c["span_score"],
                bm25_score=c["hit"].bm25_score,
                context=artifact.chunk_text(c["chunk"]),
                highlight=c["highlight"],
            )
        )
        if len(results) == k:
            break
    return results


def evaluate_open(
    squad: SquadDataset,
    n_retrieve: int,
    k_values: Sequence[int],
    params: ModelParameters,
    vocab: Vocab,
    artifact: IndexArtifact,
    max_answer_len: int = 30,
) -> dict[int, MetricReport]:
    """Open-domain EM/F1 per k (any-of-k credit), plus scorer precision@1.

    precision@1 asks whether the top-ranked chunk contains a gold answer
    span; it is computed over the questions whose context document exists in
    the corpus and reported identically in every k's report.
    """
    if not k_values:
        raise ValueError("k_values must be non-empty")
    k_values = sorted(set(int(k) for k in k_values))
    k_max = k_values[-1]
    context_to_doc = doc_id_by_context(artifact)

    em_sums = {k: 0.0 for k in k_values}
    f1_sums = {k: 0.0 for k in k_values}
    p1_flags: list[bool] = []
    n = len(squad.entries)
    for entry in squad.entries:
        answers = answer(entry.question, n_retrieve, k_max, params, vocab, artifact, max_answer_len)
        golds = [a.text for a in entry.answers]
        for k in k_values:
            top = answers[:k]
            em_sums[k] += max((exact_match(a.answer_text, golds) for a in top), default=0)
            f1_sums[k] += max((f1(a.answer_text, golds) for a in top), default=0.0)
        gold_doc = context_to_doc.get(entry.context)
        if gold_doc is not None:
            flag = bool(answers) and _gold_answer_in_chunk(
                artifact.chunk_by_id(answers[0].chunk_id), entry, gold_doc
            ) is not None
            p1_flags.append(flag)

    p1 = sum(p1_flags) / len(p1_flags) if p1_flags else None
    return {
        k: MetricReport(
            em=em_sums[k] / n if n else 0.0,
            f1=f1_sums[k] / n if n else 0.0,
            precision_at_1=p1,
            n_examples=n,
        )
        for k in k_values
    }
