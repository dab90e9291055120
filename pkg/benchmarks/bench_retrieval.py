"""Benchmark the BM25 scoring kernel: numba @njit path vs pure numpy.

Builds a synthetic corpus, runs identical query batches through both kernel
implementations, and reports queries/second. Run:

    python benchmarks/bench_retrieval.py [--chunks 20000] [--queries 300]
"""
import argparse
import time

import numpy as np

from mixqa import kernels
from mixqa.corpus import Document, ingest_corpus
from mixqa.retriever import _query_term_rows, build_index

WORDS = [f"w{i:03d}" for i in range(800)]


def build(n_chunks: int, seed: int):
    rng = np.random.default_rng(seed)
    docs = []
    # zipf-ish skew so posting lists have realistic length spread
    weights = 1.0 / np.arange(1, len(WORDS) + 1)
    weights /= weights.sum()
    for i in range(n_chunks):
        n = int(rng.integers(40, 120))
        toks = rng.choice(WORDS, size=n, p=weights)
        docs.append(Document(f"d{i:06d}", "", " ".join(toks)))
    ingest = ingest_corpus(docs, 200, 200)
    return build_index(ingest.chunks), rng


def run(index, queries, accumulate):
    doc_len = index.doc_lengths.astype(np.float64)
    t0 = time.perf_counter()
    sink = 0.0
    for rows in queries:
        scores = np.zeros(index.n_chunks)
        accumulate(rows, index.indptr, index.post_chunks, index.post_tfs, index.idf,
                   doc_len, index.avgdl, index.params.k1, index.params.b, scores)
        sink += scores[0]
    return time.perf_counter() - t0, sink


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--chunks", type=int, default=20000)
    ap.add_argument("--queries", type=int, default=300)
    ap.add_argument("--terms", type=int, default=6, help="query terms per query")
    args = ap.parse_args()

    print(f"building index over {args.chunks} chunks ...")
    index, rng = build(args.chunks, seed=0)
    nnz = len(index.post_chunks)
    print(f"  {len(index.terms)} terms, {nnz} postings")

    queries = []
    for _ in range(args.queries):
        terms = [str(w) for w in rng.choice(WORDS, size=args.terms, replace=False)]
        queries.append(_query_term_rows(index, terms))

    paths = [("numpy", kernels.bm25_accumulate_numpy)]
    if kernels.HAS_NUMBA:
        kernels.bm25_accumulate_numba(*_warmup_args(index))  # compile outside timing
        paths.append(("numba", kernels.bm25_accumulate_numba))
    else:
        print("numba not importable; benchmarking numpy path only")

    results = {}
    for name, fn in paths:
        dt, _ = run(index, queries, fn)
        results[name] = dt
        print(f"  {name:6s}: {dt:7.3f} s  ({args.queries / dt:8.1f} queries/s)")

    if len(results) == 2:
        print(f"  speedup numba vs numpy: {results['numpy'] / results['numba']:.2f}x")
        print("note: the encoder's matmuls are BLAS-bound and gain nothing from")
        print("jit; only elementwise-heavy kernels are jitted (see bench_encoder.py)")


def _warmup_args(index):
    rows = np.array([0], dtype=np.int64)
    scores = np.zeros(index.n_chunks)
    return (rows, index.indptr, index.post_chunks, index.post_tfs, index.idf,
            index.doc_lengths.astype(np.float64), index.avgdl,
            index.params.k1, index.params.b, scores)


if __name__ == "__main__":
    main()
