"""Benchmark the encoder's jitted elementwise kernels vs their numpy twins.

Times one training-shaped forward+backward (the masked softmax, GELU and
layer-norm kernels dominate; the matmuls between them are identical BLAS
calls on both paths). Toggle paths with MIXQA_NUMBA=0. Run:

    python benchmarks/bench_encoder.py
    MIXQA_NUMBA=0 python benchmarks/bench_encoder.py
"""
import argparse
import time

import numpy as np

from mixqa import kernels
from mixqa.encoder import DropoutRng, EncoderConfig, backward_from_cache, forward_with_cache, init_parameters


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=240)
    ap.add_argument("--seq", type=int, default=64)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()

    dtype = np.float32 if args.dtype == "float32" else np.float64
    cfg = EncoderConfig(vocab_size=500)
    params = init_parameters(cfg, seed=0, dtype=dtype)
    rng = np.random.default_rng(1)
    ids = rng.integers(4, 500, (args.batch, args.seq))
    attn = np.ones((args.batch, args.seq), dtype=bool)

    # warm once (jit compile if the numba path is active)
    h, cache = forward_with_cache(params, ids, attn, True, DropoutRng(0))
    backward_from_cache(params, cache, h)

    t0 = time.perf_counter()
    for _ in range(args.reps):
        h, cache = forward_with_cache(params, ids, attn, True, DropoutRng(0))
        backward_from_cache(params, cache, h)
    dt = (time.perf_counter() - t0) / args.reps
    seqs = args.batch / dt
    print(f"kernel path: {kernels.active_kernel_name()}  dtype: {args.dtype}")
    print(f"fwd+bwd [{args.batch} x {args.seq}]: {dt * 1000:.0f} ms  ({seqs:.0f} sequences/s)")


if __name__ == "__main__":
    main()
