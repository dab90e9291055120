"""End-to-end answer contracts on small corpora with untrained models:
ranking rules, duplicate suppression, text fidelity, batching invariance,
and evaluate_open's monotonicity in k."""
import numpy as np
import pytest

from mixqa.corpus import Document, SquadAnswer, SquadDataset, SquadEntry, ingest_corpus
from mixqa.encoder import EncoderConfig, init_parameters
from mixqa.evalkit import build_vocab
from mixqa.pipeline import answer, evaluate_open
from mixqa.retriever import build_artifact

CFG = dict(d_model=16, n_layers=1, n_heads=2, d_ff=24, max_seq_len=64, dropout_rate=0.0)


def small_world(docs, seed=0):
    ingest = ingest_corpus(docs, 40, 20)
    artifact = build_artifact(ingest, 40, 20)
    vocab = build_vocab(artifact)
    params = init_parameters(EncoderConfig(vocab_size=len(vocab), **CFG), seed)
    return artifact, vocab, params


class TestAnswer:
    def test_single_chunk_corpus(self):
        artifact, vocab, params = small_world(
            [Document("d0", "Cats", "the cat sat on the mat beside the door.")]
        )
        results = answer("where did the cat sit", 5, 1, params, vocab, artifact)
        assert len(results) == 1
        a = results[0]
        assert a.rank == 1 and a.doc_id == "d0"
        assert a.answer_text in artifact.documents["d0"].text

    def test_empty_retrieval_is_empty_list(self):
        artifact, vocab, params = small_world([Document("d0", "", "alpha beta gamma")])
        assert answer("zz qq ww", 5, 2, params, vocab, artifact) == []

    def test_rejects_bad_k(self):
        artifact, vocab, params = small_world([Document("d0", "", "alpha beta")])
        with pytest.raises(ValueError):
            answer("alpha", 2, 3, params, vocab, artifact)
        with pytest.raises(ValueError):
            answer("alpha", 2, 0, params, vocab, artifact)

    def test_ranking_by_paragraph_score(self):
        docs = [Document(f"d{i}", "", f"the wolf pack number {i} runs over snow fields "
                                      + "and hunts elk near the river bend every winter season.")
                for i in range(6)]
        artifact, vocab, params = small_world(docs, seed=3)
        results = answer("where does the wolf pack hunt", 6, 4, params, vocab, artifact)
        assert len(results) <= 4
        scores = [r.paragraph_score for r in results]
        assert scores == sorted(scores, reverse=True)
        assert [r.rank for r in results] == list(range(1, len(results) + 1))

    def test_answer_text_matches_highlight_and_source(self):
        docs = [Document("d0", "", "brown bears eat salmon during autumn in the northern valleys."),
                Document("d1", "", "black bears prefer berries and roam the southern woods at dawn.")]
        artifact, vocab, params = small_world(docs, seed=4)
        for a in answer("what do bears eat", 4, 4, params, vocab, artifact):
            doc = artifact.documents[a.doc_id]
            assert a.answer_text in doc.text
            h0, h1 = a.highlight
            assert a.context[h0:h1] == a.answer_text
            assert a.context in doc.text

    def test_batching_invariance(self):
        docs = [Document(f"d{i}", "", "the silver fox digs a den under cedar roots "
                                      + f"near outpost {i} and stores food for the long frost.")
                for i in range(9)]
        artifact, vocab, params = small_world(docs, seed=5)
        a1 = answer("where does the silver fox dig", 9, 9, params, vocab, artifact, batch_size=1)
        a2 = answer("where does the silver fox dig", 9, 9, params, vocab, artifact, batch_size=32)
        assert [r.chunk_id for r in a1] == [r.chunk_id for r in a2]
        for x, y in zip(a1, a2):
            assert x.paragraph_score == pytest.approx(y.paragraph_score, abs=1e-6)
            assert x.span == y.span

    def test_duplicate_answers_from_overlapping_chunks_suppressed(self):
        # stride < granularity so the same sentence lands in two chunks
        text = " ".join(f"filler{i}" for i in range(30)) + \
            " the hidden treasure lies below the old lighthouse . " + \
            " ".join(f"padding{i}" for i in range(30))
        ingest = ingest_corpus([Document("d0", "", text)], 40, 15)
        artifact = build_artifact(ingest, 40, 15)
        vocab = build_vocab(artifact)
        params = init_parameters(EncoderConfig(vocab_size=len(vocab), **CFG), 6)
        results = answer("where does the hidden treasure lie", 10, 10, params, vocab, artifact)
        seen = [(r.doc_id, r.answer_text) for r in results]
        assert len(seen) == len(set(seen))

    def test_matches_per_chunk_oracle(self):
        # rank/scores equal scoring every retrieved chunk independently
        from mixqa.corpus import tokenize
        from mixqa.encoder import encode, pack
        from mixqa.multitask import extract_span
        from mixqa.retriever import retrieve_top_n

        docs = [Document(f"d{i}", "", "grey owls nest in hollow trunks near marsh "
                                      + f"site {i} and hunt voles after dusk.") for i in range(5)]
        artifact, vocab, params = small_world(docs, seed=7)
        question = "where do grey owls nest"
        got = answer(question, 5, 5, params, vocab, artifact)

        q_ids = vocab.encode(t.surface for t in tokenize(question))
        t_ = params.tensors
        oracle = []
        for hit in retrieve_top_n(artifact.index, question, 5):
            chunk = artifact.chunk_by_id(hit.chunk_id)
            packed = pack(q_ids, vocab.encode(chunk.surfaces()), params.config)
            h = encode(params, packed)
            score = float(h[0] @ t_["heads.score.w"] + t_["heads.score.b"][0])
            logits = h[packed.paragraph_start : packed.paragraph_start + packed.paragraph_len] @ t_["heads.span.w"] + t_["heads.span.b"]
            s, e, _ = extract_span(logits[:, 0], logits[:, 1], 30)
            oracle.append((hit.chunk_id, score, (s, e)))
        oracle.sort(key=lambda x: -x[1])
        assert [r.chunk_id for r in got] == [o[0] for o in oracle]
        for r, o in zip(got, oracle):
            assert r.paragraph_score == pytest.approx(o[1], abs=1e-6)
            assert r.span == o[2]


class TestEvaluateOpen:
    def squad_over(self, docs, answers):
        entries = []
        for i, (doc, ans) in enumerate(zip(docs, answers)):
            start = doc.text.index(ans)
            entries.append(SquadEntry(f"q{i}", f"question about {doc.doc_id}",
                                      doc.text, (SquadAnswer(ans, start),)))
        return SquadDataset(tuple(entries))

    def test_monotone_in_k_and_report_shape(self):
        docs = [Document(f"d{i}", "", f"the lake district zone {i} holds trout and perch "
                                      "beneath clear water all summer.") for i in range(5)]
        artifact, vocab, params = small_world(docs, seed=8)
        squad = self.squad_over(docs, ["trout"] * 5)
        reports = evaluate_open(squad, 5, [1, 2, 3], params, vocab, artifact)
        assert set(reports) == {1, 2, 3}
        assert reports[1].em <= reports[2].em <= reports[3].em
        assert reports[1].f1 <= reports[2].f1 <= reports[3].f1
        for rep in reports.values():
            assert 0.0 <= rep.em <= rep.f1 <= 1.0 or rep.f1 == rep.em == 0.0
            assert rep.n_examples == 5
            assert rep.precision_at_1 is not None

    def test_empty_dataset(self):
        docs = [Document("d0", "", "alpha beta gamma delta")]
        artifact, vocab, params = small_world(docs, seed=9)
        reports = evaluate_open(SquadDataset(()), 3, [1], params, vocab, artifact)
        assert reports[1].n_examples == 0
        assert reports[1].em == 0.0

    def test_em_le_f1_per_report(self):
        docs = [Document(f"d{i}", "", f"the granary at station {i} stores oats and rye "
                                      "for the cold months ahead.") for i in range(4)]
        artifact, vocab, params = small_world(docs, seed=10)
        squad = self.squad_over(docs, ["oats"] * 4)
        reports = evaluate_open(squad, 4, [1, 2], params, vocab, artifact)
        for rep in reports.values():
            assert rep.em <= rep.f1 + 1e-12
