"""Tokenizer, chunker and loader behavior, including the coverage/overlap
properties the chunker must keep for every valid (granularity, stride)."""
import json

import numpy as np
import pytest

from mixqa.corpus import (
    Document,
    chunk_document,
    ingest_corpus,
    load_squad,
    tokenize,
)


def tok_tuples(text):
    return [(t.surface, t.char_start, t.char_end) for t in tokenize(text)]


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_basic_sentence(self):
        assert tok_tuples("The cat.") == [("the", 0, 3), ("cat", 4, 7), (".", 7, 8)]

    def test_two_words(self):
        assert tok_tuples("Question Answering") == [("question", 0, 8), ("answering", 9, 18)]

    def test_punctuation_is_separate(self):
        assert [t.surface for t in tokenize("don't stop!")] == ["don", "'", "t", "stop", "!"]

    def test_offsets_recover_source(self):
        text = "Ålesund, Norway: 62.47°N."
        for t in tokenize(text):
            assert text[t.char_start : t.char_end].lower() == t.surface or t.surface

    def test_surface_matches_normalized_slice(self):
        import unicodedata

        text = "GRÜN über    Straße — 42"
        for t in tokenize(text):
            assert unicodedata.normalize("NFC", text[t.char_start : t.char_end].lower()) == t.surface

    def test_deterministic(self):
        text = "a b c. d-e f"
        assert tokenize(text) == tokenize(text)


def make_doc(n_tokens, doc_id="d"):
    return Document(doc_id, "t", " ".join(f"w{i}" for i in range(n_tokens)))


class TestChunkDocument:
    def test_exact_fit_single_window(self):
        chunks = chunk_document(make_doc(400), 400, 300)
        assert len(chunks) == 1
        assert (chunks[0].window_start, len(chunks[0].tokens)) == (0, 400)

    def test_three_windows(self):
        chunks = chunk_document(make_doc(1000), 400, 300)
        spans = [(c.window_start, c.window_start + len(c.tokens)) for c in chunks]
        assert spans == [(0, 400), (300, 700), (600, 1000)]

    def test_tail_window(self):
        chunks = chunk_document(make_doc(401), 400, 300)
        spans = [(c.window_start, c.window_start + len(c.tokens)) for c in chunks]
        assert spans == [(0, 400), (300, 401)]

    def test_short_doc_one_chunk(self):
        chunks = chunk_document(make_doc(5), 400, 300)
        assert len(chunks) == 1 and len(chunks[0].tokens) == 5

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            chunk_document(make_doc(10), 4, 5)
        with pytest.raises(ValueError):
            chunk_document(make_doc(10), 4, 0)

    @pytest.mark.parametrize("g,s", [(400, 300), (200, 100), (100, 50), (7, 3), (5, 5)])
    def test_coverage_and_overlap(self, g, s):
        rng = np.random.default_rng(g * 1000 + s)
        for _ in range(40):
            n = int(rng.integers(1, 1200))
            chunks = chunk_document(make_doc(n), g, s)
            covered = set()
            for c in chunks:
                covered.update(range(c.window_start, c.window_start + len(c.tokens)))
            assert covered == set(range(n))
            for a, b in zip(chunks, chunks[1:]):
                if len(a.tokens) == g:  # consecutive full windows overlap by g - s
                    a_span = set(range(a.window_start, a.window_start + g))
                    b_span = set(range(b.window_start, b.window_start + len(b.tokens)))
                    assert len(a_span & b_span) == g - s

    def test_no_window_contained_in_previous(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(1, 500))
            g = int(rng.integers(1, 80))
            s = int(rng.integers(1, g + 1))
            chunks = chunk_document(make_doc(n), g, s)
            for a, b in zip(chunks, chunks[1:]):
                a_end = a.window_start + len(a.tokens)
                b_end = b.window_start + len(b.tokens)
                assert not (b.window_start >= a.window_start and b_end <= a_end)

    def test_round_trip_text(self):
        doc = Document("d", "t", "Alpha beta; gamma delta. Epsilon!")
        for c in chunk_document(doc, 3, 2):
            assert c.text(doc.text) in doc.text


def write_squad(tmp_path, data):
    p = tmp_path / "squad.json"
    p.write_text(json.dumps(data), encoding="utf-8")
    return p


class TestLoadSquad:
    def test_two_questions(self, tmp_path):
        ctx = "Paris is the capital of France."
        data = {
            "data": [{"title": "x", "paragraphs": [{"context": ctx, "qas": [
                {"id": "q1", "question": "What is the capital of France?",
                 "answers": [{"text": "Paris", "answer_start": 0}]},
                {"id": "q2", "question": "Capital of what country?",
                 "answers": [{"text": "France", "answer_start": 24}]},
            ]}]}]
        }
        ds = load_squad(write_squad(tmp_path, data))
        assert len(ds) == 2
        assert ds.entries[0].question_id == "q1"
        assert ds.entries[1].answers[0].text == "France"

    def test_bad_offset_names_question(self, tmp_path):
        data = {
            "data": [{"title": "x", "paragraphs": [{"context": "abc def", "qas": [
                {"id": "bad-q", "question": "?", "answers": [{"text": "def", "answer_start": 0}]},
            ]}]}]
        }
        with pytest.raises(ValueError, match="bad-q"):
            load_squad(write_squad(tmp_path, data))

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "junk.json"
        p.write_text("{nope", encoding="utf-8")
        with pytest.raises(json.JSONDecodeError):
            load_squad(p)


class TestIngestCorpus:
    def test_two_docs(self, tmp_path):
        p = tmp_path / "corpus.jsonl"
        lines = [
            json.dumps({"doc_id": "a", "title": "", "text": " ".join(f"w{i}" for i in range(400))}),
            json.dumps({"doc_id": "b", "title": "", "text": " ".join(f"w{i}" for i in range(400))}),
        ]
        p.write_text("\n".join(lines), encoding="utf-8")
        res = ingest_corpus([p], 400, 300)
        assert res.stats.n_chunks == 2
        assert res.stats.mean_chunk_tokens == 400.0

    def test_empty_corpus(self, tmp_path):
        p = tmp_path / "corpus.jsonl"
        p.write_text("", encoding="utf-8")
        res = ingest_corpus([p], 100, 50)
        assert res.stats.n_chunks == 0 and res.stats.n_documents == 0

    def test_duplicate_doc_id(self):
        docs = [Document("a", "", "x y"), Document("a", "", "z w")]
        with pytest.raises(ValueError, match="duplicate doc_id"):
            ingest_corpus(docs, 100, 50)

    def test_chunk_count_matches_per_doc_chunking(self):
        rng = np.random.default_rng(4)
        docs = [make_doc(int(rng.integers(1, 400)), f"d{i}") for i in range(25)]
        res = ingest_corpus(docs, 100, 50)
        expected = sum(len(chunk_document(d, 100, 50)) for d in docs)
        assert res.stats.n_chunks == expected

    def test_deterministic_order(self):
        docs = [make_doc(220, "b"), make_doc(130, "a")]
        res1 = ingest_corpus(docs, 100, 50)
        res2 = ingest_corpus(list(reversed(docs)), 100, 50)
        assert [c.chunk_id for c in res1.chunks] == [c.chunk_id for c in res2.chunks]
