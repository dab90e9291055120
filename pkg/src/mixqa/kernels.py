"""Hot numeric kernels: numba-jitted with pure-numpy fallbacks.

Two families live here:

* the BM25 postings accumulation (the retriever's inner loop), and
* the encoder's elementwise-heavy steps (masked attention softmax and its
  backward, GELU, layer norm), which dominate training time on CPU because
  they stream large [batch, heads, L, L] arrays.

Every kernel has a numpy twin computing the same math. Selection:

  MIXQA_NUMBA=0 (or "false"/"no"/"off")  -> pure numpy paths
  default                                -> numba if importable, else numpy

The BM25 pair performs the identical sequence of IEEE-754 operations in both
paths, so outputs are bit-identical; the encoder pairs agree to rounding
(fused vs. staged reductions). Parallel kernels assign whole rows to threads
with no cross-thread reductions, so results do not depend on scheduling and
training stays bit-reproducible run to run.

The encoder's matmuls are *not* jitted: they are BLAS calls numba cannot
improve (see benchmarks/bench_retrieval.py and bench_encoder.py).
"""
from __future__ import annotations

import math
import os

import numpy as np

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _env_wants_numba() -> bool:
    return os.environ.get("MIXQA_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# BM25 postings accumulation
# ---------------------------------------------------------------------------


def bm25_accumulate_numpy(
    term_ids: np.ndarray,
    indptr: np.ndarray,
    post_chunks: np.ndarray,
    post_tfs: np.ndarray,
    idf: np.ndarray,
    doc_len: np.ndarray,
    avgdl: float,
    k1: float,
    b: float,
    scores: np.ndarray,
) -> None:
    """Add each query term's BM25 contribution into ``scores`` (vectorized)."""
    for t in term_ids:
        lo, hi = indptr[t], indptr[t + 1]
        chunks = post_chunks[lo:hi]
        tf = post_tfs[lo:hi].astype(np.float64)
        denom = tf + k1 * ((1.0 - b) + b * (doc_len[chunks] / avgdl))
        # chunk ids are unique within one posting list, so fancy += is safe
        scores[chunks] += (idf[t] * (tf * (k1 + 1.0))) / denom


def _bm25_accumulate_scalar(term_ids, indptr, post_chunks, post_tfs, idf,
                            doc_len, avgdl, k1, b, scores) -> None:
    for ti in range(term_ids.shape[0]):
        t = term_ids[ti]
        for p in range(indptr[t], indptr[t + 1]):
            c = post_chunks[p]
            tf = np.float64(post_tfs[p])
            denom = tf + k1 * ((1.0 - b) + b * (doc_len[c] / avgdl))
            scores[c] += (idf[t] * (tf * (k1 + 1.0))) / denom


# ---------------------------------------------------------------------------
# Masked attention softmax over the last axis, forward and backward.
# Rows with an all-false mask cannot occur: position 0 (CLS) is always real.
# ---------------------------------------------------------------------------


def masked_softmax_numpy(s: np.ndarray, key_mask: np.ndarray) -> None:
    """In place: softmax of s [B,H,L,L] over allowed key positions.

    key_mask is [B, L] boolean; disallowed keys end up with weight exactly 0.
    """
    fill = np.asarray(-np.inf, dtype=s.dtype)
    np.copyto(s, fill, where=~key_mask[:, None, None, :])
    m = s.max(-1, keepdims=True)
    np.subtract(s, m, out=s)
    np.exp(s, out=s)
    np.copyto(s, 0.0, where=~key_mask[:, None, None, :])
    tot = s.sum(-1, keepdims=True)
    np.divide(s, tot, out=s)


def softmax_backward_numpy(da: np.ndarray, a: np.ndarray) -> None:
    """In place on da: dS = A * (dA - sum_j(dA * A)) rowwise over the last axis."""
    dot = (da * a).sum(-1, keepdims=True)
    np.subtract(da, dot, out=da)
    np.multiply(da, a, out=da)


# ---------------------------------------------------------------------------
# GELU (exact, erf-based), forward producing phi for the backward pass.
# ---------------------------------------------------------------------------


def gelu_forward_numpy(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    from scipy.special import erf

    phi = 0.5 * (1.0 + erf(u * u.dtype.type(_SQRT1_2)))
    return u * phi, phi


def gelu_backward_numpy(dg: np.ndarray, u: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return dg * (phi + u * np.exp(-0.5 * u * u) * u.dtype.type(_INV_SQRT_2PI))


# ---------------------------------------------------------------------------
# Layer norm over the last axis (pre-gain statistics cached for backward).
# ---------------------------------------------------------------------------


def layer_norm_numpy(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat * g + b, xhat, inv[..., 0]


def layer_norm_backward_numpy(dy: np.ndarray, g: np.ndarray, xhat: np.ndarray, inv: np.ndarray):
    dxhat = dy * g
    dx = inv[..., None] * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


# ---------------------------------------------------------------------------
# Deterministic scatter-add for embedding gradients (np.add.at is slow).
# ---------------------------------------------------------------------------


def scatter_add_numpy(target: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    np.add.at(target, ids, rows)


def _scatter_add_scalar(target, ids, rows) -> None:
    for i in range(ids.shape[0]):
        t = ids[i]
        for j in range(rows.shape[1]):
            target[t, j] += rows[i, j]


# ---------------------------------------------------------------------------
# Jit compilation and path selection.
# ---------------------------------------------------------------------------

try:
    import warnings

    # the TBB-version notice fires lazily when the threading layer starts;
    # it is harmless (numba falls back to another layer), so keep it quiet
    warnings.filterwarnings("ignore", message=".*TBB.*")
    import numba  # noqa: F401
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _env_wants_numba()

if HAS_NUMBA:
    bm25_accumulate_numba = njit(cache=True)(_bm25_accumulate_scalar)

    @njit(cache=True, parallel=True)
    def masked_softmax_numba(s4, key_mask):  # pragma: no cover - numba path
        bs, heads, ln, _ = s4.shape
        s2 = s4.reshape(bs * heads * ln, ln)
        for r in prange(bs * heads * ln):
            b = r // (heads * ln)
            m = -np.inf
            for j in range(ln):
                if key_mask[b, j] and s2[r, j] > m:
                    m = s2[r, j]
            tot = 0.0
            for j in range(ln):
                if key_mask[b, j]:
                    v = math.exp(s2[r, j] - m)
                    s2[r, j] = v
                    tot += v
                else:
                    s2[r, j] = 0.0
            inv = 1.0 / tot
            for j in range(ln):
                s2[r, j] *= inv

    @njit(cache=True, parallel=True)
    def softmax_backward_numba(da2, a2):  # pragma: no cover
        rows, ln = da2.shape
        for r in prange(rows):
            dot = 0.0
            for j in range(ln):
                dot += da2[r, j] * a2[r, j]
            for j in range(ln):
                da2[r, j] = a2[r, j] * (da2[r, j] - dot)

    @njit(cache=True, parallel=True)
    def gelu_forward_numba(u_flat, out_flat, phi_flat):  # pragma: no cover
        for i in prange(u_flat.shape[0]):
            p = 0.5 * (1.0 + math.erf(u_flat[i] * _SQRT1_2))
            phi_flat[i] = p
            out_flat[i] = u_flat[i] * p

    @njit(cache=True, parallel=True)
    def gelu_backward_numba(dg_flat, u_flat, phi_flat, du_flat):  # pragma: no cover
        for i in prange(u_flat.shape[0]):
            x = u_flat[i]
            du_flat[i] = dg_flat[i] * (phi_flat[i] + x * math.exp(-0.5 * x * x) * _INV_SQRT_2PI)

    @njit(cache=True, parallel=True)
    def layer_norm_numba(x2, g, b, eps, y2, xhat2, inv1):  # pragma: no cover
        rows, d = x2.shape
        for r in prange(rows):
            mu = 0.0
            for j in range(d):
                mu += x2[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x2[r, j] - mu
                var += t * t
            var /= d
            inv = 1.0 / math.sqrt(var + eps)
            inv1[r] = inv
            for j in range(d):
                xh = (x2[r, j] - mu) * inv
                xhat2[r, j] = xh
                y2[r, j] = xh * g[j] + b[j]

    @njit(cache=True, parallel=True)
    def layer_norm_backward_numba(dy2, g, xhat2, inv1, dx2):  # pragma: no cover
        rows, d = dy2.shape
        for r in prange(rows):
            mean_dxhat = 0.0
            mean_dxhat_xhat = 0.0
            for j in range(d):
                dxh = dy2[r, j] * g[j]
                mean_dxhat += dxh
                mean_dxhat_xhat += dxh * xhat2[r, j]
            mean_dxhat /= d
            mean_dxhat_xhat /= d
            for j in range(d):
                dxh = dy2[r, j] * g[j]
                dx2[r, j] = inv1[r] * (dxh - mean_dxhat - xhat2[r, j] * mean_dxhat_xhat)

    # scatter order must stay fixed for bit-reproducibility: no prange here
    scatter_add_numba = njit(cache=True)(_scatter_add_scalar)
else:  # pragma: no cover - exercised when numba is absent
    bm25_accumulate_numba = None
    masked_softmax_numba = None
    softmax_backward_numba = None
    gelu_forward_numba = None
    gelu_backward_numba = None
    layer_norm_numba = None
    layer_norm_backward_numba = None
    scatter_add_numba = None


def active_kernel_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


bm25_accumulate = bm25_accumulate_numba if USE_NUMBA else bm25_accumulate_numpy


def masked_softmax(s4: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    """s4 [B,H,L,L] -> attention weights over allowed keys; masked keys get 0.

    Consumes s4 (updated in place) and returns it.
    """
    s4 = np.ascontiguousarray(s4)
    if USE_NUMBA:
        masked_softmax_numba(s4, key_mask)
    else:
        masked_softmax_numpy(s4, key_mask)
    return s4


def softmax_backward(da: np.ndarray, a: np.ndarray) -> np.ndarray:
    """dS = A * (dA - rowsum(dA * A)); consumes da in place and returns it."""
    da = np.ascontiguousarray(da)
    ln = da.shape[-1]
    if USE_NUMBA:
        softmax_backward_numba(da.reshape(-1, ln), np.ascontiguousarray(a).reshape(-1, ln))
    else:
        softmax_backward_numpy(da, a)
    return da


def gelu_forward(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if USE_NUMBA:
        u = np.ascontiguousarray(u)
        out = np.empty_like(u)
        phi = np.empty_like(u)
        gelu_forward_numba(u.reshape(-1), out.reshape(-1), phi.reshape(-1))
        return out, phi
    return gelu_forward_numpy(u)


def gelu_backward(dg: np.ndarray, u: np.ndarray, phi: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        dg = np.ascontiguousarray(dg)
        du = np.empty_like(u)
        gelu_backward_numba(dg.reshape(-1), u.reshape(-1), phi.reshape(-1), du.reshape(-1))
        return du
    return gelu_backward_numpy(dg, u, phi)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    """Returns (y, xhat, inv_sigma); xhat and inv_sigma feed the backward pass."""
    if USE_NUMBA:
        x = np.ascontiguousarray(x)
        d = x.shape[-1]
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(x.shape[:-1], dtype=x.dtype)
        layer_norm_numba(x.reshape(-1, d), g, b, eps, y.reshape(-1, d),
                         xhat.reshape(-1, d), inv.reshape(-1))
        return y, xhat, inv
    return layer_norm_numpy(x, g, b, eps)


def layer_norm_backward(dy: np.ndarray, g: np.ndarray, xhat: np.ndarray, inv: np.ndarray):
    """Returns (dx, dgain, dbias)."""
    if USE_NUMBA:
        dy = np.ascontiguousarray(dy)
        d = dy.shape[-1]
        dx = np.empty_like(dy)
        layer_norm_backward_numba(dy.reshape(-1, d), g, xhat.reshape(-1, d),
                                  inv.reshape(-1), dx.reshape(-1, d))
        axes = tuple(range(dy.ndim - 1))
        return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)
    return layer_norm_backward_numpy(dy, g, xhat, inv)


def scatter_add(target: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """target[ids[i]] += rows[i], accumulated in index order."""
    if USE_NUMBA:
        scatter_add_numba(target, ids, rows)
    else:
        scatter_add_numpy(target, ids, rows)
