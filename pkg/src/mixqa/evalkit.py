"""Answer metrics, training-set construction, the granularity sweep harness,
and a seeded synthetic benchmark small enough to train against on a CPU.

EM and F1 follow the standard SQuAD v1.1 normalization (lowercase, strip
punctuation and English articles, collapse whitespace), with one stated
convention: if both normalized token bags are empty F1 is 1, if exactly one
is empty F1 is 0.
"""
from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Chunk, Document, SquadAnswer, SquadDataset, SquadEntry, ingest_corpus, tokenize
from .encoder import Vocab
from .multitask import QAExample, ScoringExample
from .retriever import BM25Params, IndexArtifact, build_artifact, retrieve_top_n

_PUNC = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles (a/an/the), collapse spaces."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNC)
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    if not golds:
        raise ValueError("golds must be non-empty")
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def f1(prediction: str, golds: Sequence[str]) -> float:
    if not golds:
        raise ValueError("golds must be non-empty")
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for g in golds:
        gold_tokens = normalize_answer(g).split()
        if not pred_tokens and not gold_tokens:
            best = max(best, 1.0)
            continue
        if not pred_tokens or not gold_tokens:
            continue
        overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
        if overlap == 0:
            continue
        p = overlap / len(pred_tokens)
        r = overlap / len(gold_tokens)
        best = max(best, 2 * p * r / (p + r))
    return best


def precision_at_1(ranked_gold_flags: Iterable) -> float:
    """Fraction of examples whose gold paragraph was ranked first.

    Accepts plain booleans or (example, flag) tuples.
    """
    flags = [bool(x[-1]) if isinstance(x, tuple) else bool(x) for x in ranked_gold_flags]
    if not flags:
        raise ValueError("precision_at_1 needs at least one example")
    return sum(flags) / len(flags)


@dataclass(frozen=True)
class MetricReport:
    em: float
    f1: float
    precision_at_1: float | None
    n_examples: int

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "precision_at_1": self.precision_at_1,
            "n_examples": self.n_examples,
        }


# ---------------------------------------------------------------------------
# Gold-paragraph resolution and training-set construction.
# ---------------------------------------------------------------------------


def doc_id_by_context(artifact: IndexArtifact) -> dict[str, str]:
    """Map document text -> doc_id (first doc wins on duplicate texts)."""
    out: dict[str, str] = {}
    for doc in artifact.documents.values():
        out.setdefault(doc.text, doc.doc_id)
    return out


def chunk_contains_answer(chunk: Chunk, answer: SquadAnswer) -> bool:
    """True iff the gold character span falls wholly inside the chunk."""
    a0 = answer.answer_start
    a1 = a0 + len(answer.text)
    return chunk.char_start <= a0 and a1 <= chunk.char_end


def _gold_answer_in_chunk(chunk: Chunk, entry: SquadEntry, gold_doc_id: str | None) -> SquadAnswer | None:
    if gold_doc_id is None or chunk.doc_id != gold_doc_id:
        return None
    for ans in entry.answers:
        if chunk_contains_answer(chunk, ans):
            return ans
    return None


def build_scorer_dataset(
    squad: SquadDataset,
    artifact: IndexArtifact,
    vocab: Vocab,
    n: int = 30,
    group_size: int = 30,
) -> tuple[list[ScoringExample], float]:
    """Retrieve n paragraphs per question; keep questions whose gold paragraph
    was retrieved. Returns (examples, retention rate)."""
    context_to_doc = doc_id_by_context(artifact)
    examples: list[ScoringExample] = []
    for entry in squad.entries:
        hits = retrieve_top_n(artifact.index, entry.question, n)
        if len(hits) < 2:
            continue
        gold_doc = context_to_doc.get(entry.context)
        gold_idx = None
        for i, hit in enumerate(hits):
            if _gold_answer_in_chunk(artifact.chunk_by_id(hit.chunk_id), entry, gold_doc) is not None:
                gold_idx = i
                break
        if gold_idx is None:
            continue
        if len(hits) > group_size:  # keep the group at the nominal size, gold included
            if gold_idx < group_size:
                hits = hits[:group_size]
            else:
                hits = hits[: group_size - 1] + [hits[gold_idx]]
                gold_idx = group_size - 1
        q_ids = vocab.encode(t.surface for t in tokenize(entry.question))
        examples.append(
            ScoringExample(
                question_ids=q_ids,
                paragraph_ids=tuple(vocab.encode(artifact.chunk_by_id(h.chunk_id).surfaces()) for h in hits),
                gold_index=gold_idx,
                chunk_ids=tuple(h.chunk_id for h in hits),
            )
        )
    retention = len(examples) / len(squad.entries) if squad.entries else 0.0
    return examples, retention


def char_span_to_token_span(chunk: Chunk, answer: SquadAnswer) -> tuple[int, int] | None:
    """Token index range (inclusive) covering the answer's character span."""
    a0 = answer.answer_start
    a1 = a0 + len(answer.text)
    s = e = None
    for i, tok in enumerate(chunk.tokens):
        if s is None and tok.char_end > a0:
            s = i
        if tok.char_start < a1:
            e = i
    if s is None or e is None or s > e:
        return None
    return s, e


def build_qa_dataset(
    squad: SquadDataset,
    artifact: IndexArtifact,
    vocab: Vocab,
    max_seq_len: int,
) -> list[QAExample]:
    """One span example per (question, chunk containing the gold char span).

    Examples whose gold span would be cut off by paragraph-tail truncation
    at pack time are dropped here.
    """
    context_to_doc = doc_id_by_context(artifact)
    by_doc: dict[str, list[Chunk]] = {}
    for chunk in artifact.chunks:
        by_doc.setdefault(chunk.doc_id, []).append(chunk)

    out: list[QAExample] = []
    for entry in squad.entries:
        gold_doc = context_to_doc.get(entry.context)
        if gold_doc is None:
            continue
        q_ids = vocab.encode(t.surface for t in tokenize(entry.question))
        keep = max_seq_len - len(q_ids) - 3
        if keep <= 0:
            continue
        for chunk in by_doc.get(gold_doc, ()):
            ans = _gold_answer_in_chunk(chunk, entry, gold_doc)
            if ans is None:
                continue
            span = char_span_to_token_span(chunk, ans)
            if span is None:
                continue
            s, e = span
            if e >= keep:  # gold falls in the truncated-away tail
                continue
            out.append(
                QAExample(
                    question_ids=q_ids,
                    paragraph_ids=vocab.encode(chunk.surfaces()),
                    start=s,
                    end=e,
                    chunk_id=chunk.chunk_id,
                )
            )
    return out


def build_vocab(artifact: IndexArtifact, squad: SquadDataset | None = None) -> Vocab:
    """Vocabulary over the indexed corpus plus (optionally) training questions."""
    terms = set(artifact.index.terms)
    if squad is not None:
        for entry in squad.entries:
            terms.update(t.surface for t in tokenize(entry.question))
    return Vocab.build(terms)


# ---------------------------------------------------------------------------
# Granularity sweep harness.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    granularity: int
    stride: int
    n_retrieve: int
    k: int
    em: float
    f1: float


def granularity_sweep(
    documents: Sequence[Document],
    squad: SquadDataset,
    settings: Sequence[tuple[int, int]],
    params_per_setting: Sequence,
    n_values: Sequence[int],
    k_values: Sequence[int] = (1,),
    max_answer_len: int = 30,
    bm25: BM25Params | None = None,
) -> list[SweepRow]:
    """Evaluate one trained model per (granularity, stride) over each n.

    ``params_per_setting[i]`` is the (ModelParameters, Vocab) pair trained for
    ``settings[i]``. Emits one row per (setting, n, k).
    """
    from .pipeline import evaluate_open  # local import to avoid a cycle

    if len(settings) != len(params_per_setting):
        raise ValueError("need one trained parameter set per (G, S) setting")
    rows: list[SweepRow] = []
    for (g, s), (params, vocab) in zip(settings, params_per_setting):
        artifact = build_artifact(ingest_corpus(documents, g, s), g, s, bm25)
        for n in n_values:
            reports = evaluate_open(squad, n, list(k_values), params, vocab, artifact, max_answer_len)
            for k in k_values:
                rep = reports[k]
                rows.append(SweepRow(g, s, n, k, rep.em, rep.f1))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    lines = ["granularity,stride,n_retrieve,k,em,f1"]
    lines += [f"{r.granularity},{r.stride},{r.n_retrieve},{r.k},{r.em!r},{r.f1!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Synthetic benchmark: templated fact documents over a closed vocabulary.
# Every document describes one uniquely-named realm; realm names are single
# tokens so paragraph relevance reduces to detecting the question's realm
# token, a pattern a small cross-encoder can learn quickly from scratch.
# ---------------------------------------------------------------------------

_NAME_ONSETS = ["var", "bel", "dor", "fen", "gal", "hul", "jor", "kel", "mar", "nor",
                "pol", "quin", "ras", "sel", "tor", "ul", "wen", "yar", "zel", "bru"]
_NAME_CODAS = ["nek", "mor", "via", "dun", "lis", "bar", "ten", "kov", "rin", "sav"]
_TERRAINS = ["highlands", "marshes", "foothills", "steppes", "lowlands", "canyons", "mesas", "fjords"]
_REGIONS = [
    "norvale", "esterwyn", "caldris", "movena", "thornwall", "quayside",
    "brymoor", "ashfen", "loroth", "vangard", "selkirk", "dunmore",
]
_RELATIONS = ["capital", "leader", "currency", "anthem", "guardian"]
_VALUES = {
    "capital": ["arlen", "borim", "calda", "elmsby", "farrow", "gilden", "harwick", "ivoria", "jasmont", "kelvora", "norwald", "ostia"],
    "leader": ["marta", "orel", "tessa", "brann", "ulric", "vanya", "selda", "rowan", "petra", "lazlo", "mirek", "quenby"],
    "currency": ["dram", "koru", "pesa", "lumin", "tekka", "orin", "sheld", "ducat", "minto", "ralo", "zent", "aurone"],
    "anthem": ["dawnsong", "emberhymn", "tidechant", "skyreel", "stonelay", "mistaria", "vowsong", "galecall", "sunmarch", "moonveil", "ashpsalm", "fernlied"],
    "guardian": ["bronn", "edda", "falk", "greta", "halvor", "inga", "jorun", "kaspar", "liv", "nils", "oddny", "runa"],
}


def _entities(n: int) -> list[str]:
    names = [f"{o}{c}" for o in _NAME_ONSETS for c in _NAME_CODAS]  # 200 distinct tokens
    if n > len(names):
        raise ValueError(f"synthetic benchmark supports at most {len(names)} documents")
    return names[:n]


def generate_synthetic_benchmark(
    n_docs: int, n_questions: int, seed: int
) -> tuple[list[Document], SquadDataset]:
    """Build a fact-lookup corpus: one uniquely-named realm per document, one
    sentence per relation, every question answerable by exactly one document.

    The realm name appears only in the opening sentence and the fact
    sentences share one fixed frame, so span extraction learned on some
    realms transfers to realms never asked about during training.
    """
    if n_docs < 1 or n_questions < 1:
        raise ValueError("n_docs and n_questions must be >= 1")
    rng = np.random.default_rng(seed)
    entities = _entities(n_docs)

    documents: list[Document] = []
    fact_offsets: list[dict[str, tuple[str, int]]] = []  # relation -> (value, char_start)
    for i, entity in enumerate(entities):
        terrain = _TERRAINS[rng.integers(0, len(_TERRAINS))]
        region = _REGIONS[rng.integers(0, len(_REGIONS))]
        parts = [f"{entity.capitalize()} lies in the {terrain} of {region}."]
        offsets: dict[str, tuple[str, int]] = {}
        pos = len(parts[0]) + 1
        for rel in _RELATIONS:
            values = _VALUES[rel]
            value = values[rng.integers(0, len(values))]
            sentence = f"Its {rel} is {value}."
            offsets[rel] = (value, pos + sentence.index(f" {value}.") + 1)
            parts.append(sentence)
            pos += len(sentence) + 1
        text = " ".join(parts)
        documents.append(Document(doc_id=f"syn{i:04d}", title=entity.capitalize(), text=text))
        fact_offsets.append(offsets)

    asked: dict[int, set[str]] = {}
    entries: list[SquadEntry] = []
    for qi in range(n_questions):
        di = qi % n_docs
        candidates = [r for r in _RELATIONS if r not in asked.get(di, set())] or _RELATIONS
        rel = candidates[rng.integers(0, len(candidates))]
        asked.setdefault(di, set()).add(rel)
        value, start = fact_offsets[di][rel]
        question = f"What is the {rel} of {entities[di]}?"
        entries.append(
            SquadEntry(
                question_id=f"synq{qi:04d}",
                question=question,
                context=documents[di].text,
                answers=(SquadAnswer(value, start),),
            )
        )
    return documents, SquadDataset(tuple(entries))


def split_squad(squad: SquadDataset, n_heldout: int) -> tuple[SquadDataset, SquadDataset]:
    if not 0 < n_heldout < len(squad.entries):
        raise ValueError("n_heldout must be in (0, len(dataset))")
    return (
        SquadDataset(squad.entries[:-n_heldout]),
        SquadDataset(squad.entries[-n_heldout:]),
    )


def write_squad_json(squad: SquadDataset, path: str | Path) -> None:
    """Write entries back out in the standard SQuAD v1.1 layout."""
    paragraphs: dict[str, dict] = {}
    order: list[str] = []
    for entry in squad.entries:
        if entry.context not in paragraphs:
            paragraphs[entry.context] = {"context": entry.context, "qas": []}
            order.append(entry.context)
        paragraphs[entry.context]["qas"].append(
            {
                "id": entry.question_id,
                "question": entry.question,
                "answers": [{"text": a.text, "answer_start": a.answer_start} for a in entry.answers],
            }
        )
    doc = {"version": "1.1", "data": [{"title": "synthetic", "paragraphs": [paragraphs[c] for c in order]}]}
    Path(path).write_text(json.dumps(doc, ensure_ascii=False), encoding="utf-8")


def write_corpus_jsonl(documents: Sequence[Document], path: str | Path) -> None:
    lines = [
        json.dumps({"doc_id": d.doc_id, "title": d.title, "text": d.text}, ensure_ascii=False)
        for d in documents
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
