"""A small transformer encoder in numpy, with hand-written backprop.

One encoder pass consumes a packed (question, paragraph) pair
``[CLS] q1..qm [SEP] p1..pk [SEP]`` and produces one contextual vector per
position; H[0] is the classification vector the scoring head reads, the
paragraph positions feed the span heads.

Architecture: learned token + absolute position embeddings, post-layer-norm
blocks (multi-head self-attention, then a GELU feed-forward), key-side
attention masking so padding never influences real positions. Dropout sits
after the embeddings, the attention output projection and the feed-forward
output; masks come from counter-keyed Philox streams so training is exactly
reproducible. Matmuls go through BLAS; the elementwise-heavy steps (masked
softmax, GELU, layer norm) go through kernels.py. Parameters are float64 by
default; float32 is supported for faster training.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

_LN_EPS = 1e-12

CKPT_MAGIC = b"MIXCKPT1"


class Vocab:
    """Token <-> id table; id 0..3 are the special tokens, rest sorted."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the four special tokens")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus_terms: Iterable[str]) -> "Vocab":
        body = sorted(set(corpus_terms) - set(SPECIAL_TOKENS))
        return cls(list(SPECIAL_TOKENS) + body)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, surfaces: Iterable[str]) -> np.ndarray:
        return np.array([self.id(s) for s in surfaces], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class PackedInput:
    """[CLS] question [SEP] paragraph [SEP], with masks marking the parts."""

    token_ids: np.ndarray  # int64 [L]
    paragraph_mask: np.ndarray  # bool [L]
    attention_mask: np.ndarray  # bool [L]
    paragraph_start: int
    paragraph_len: int

    def __len__(self) -> int:
        return len(self.token_ids)


def pack(question_ids: np.ndarray, paragraph_ids: np.ndarray, config: EncoderConfig) -> PackedInput:
    """Lay out a pair; the paragraph tail is truncated, never the question."""
    m = len(question_ids)
    if m + 3 > config.max_seq_len:
        raise ValueError(f"question of {m} tokens exceeds max_seq_len - 3 = {config.max_seq_len - 3}")
    keep = min(len(paragraph_ids), config.max_seq_len - m - 3)
    p = np.asarray(paragraph_ids[:keep], dtype=np.int64)
    ids = np.concatenate(
        [[CLS_ID], np.asarray(question_ids, dtype=np.int64), [SEP_ID], p, [SEP_ID]]
    ).astype(np.int64)
    para_mask = np.zeros(len(ids), dtype=bool)
    para_start = 1 + m + 1
    para_mask[para_start : para_start + keep] = True
    return PackedInput(
        token_ids=ids,
        paragraph_mask=para_mask,
        attention_mask=np.ones(len(ids), dtype=bool),
        paragraph_start=para_start,
        paragraph_len=keep,
    )


def pad_batch(packed: Sequence[PackedInput]) -> tuple[np.ndarray, np.ndarray]:
    """Stack packed inputs into (ids [B,Lmax], attention mask [B,Lmax])."""
    lmax = max(len(p) for p in packed)
    ids = np.full((len(packed), lmax), PAD_ID, dtype=np.int64)
    attn = np.zeros((len(packed), lmax), dtype=bool)
    for i, p in enumerate(packed):
        ids[i, : len(p)] = p.token_ids
        attn[i, : len(p)] = p.attention_mask
    return ids, attn


class DropoutRng:
    """Counter-based dropout stream: mask #n comes from Philox key (seed, n)."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed)
        self._n = 0

    def mask(self, shape: tuple[int, ...], rate: float) -> np.ndarray:
        key = np.array([self._seed, np.uint64(self._n)], dtype=np.uint64)
        self._n += 1
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.random(shape) >= rate


@dataclass
class ModelParameters:
    """All learnable tensors: encoder weights plus the two task heads."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["emb"].dtype

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_parameters(
    config: EncoderConfig, seed: int, dtype=np.float64, init_std: float = 0.1
) -> ModelParameters:
    """Seeded random init. The 0.1 weight scale matters when training from
    scratch: smaller scales leave the attention logits so flat that the
    matching signal between question and paragraph tokens never develops."""
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    t: dict[str, np.ndarray] = {}

    def normal(*shape):
        return rng.normal(0.0, init_std, shape).astype(dtype)

    t["emb"] = normal(config.vocab_size, d)
    t["pos"] = normal(config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"l{i}."
        for w in ("wq", "wk", "wv", "wo"):
            t[p + w] = normal(d, d)
        for b in ("bq", "bk", "bv", "bo"):
            t[p + b] = np.zeros(d, dtype)
        t[p + "ln1.g"] = np.ones(d, dtype)
        t[p + "ln1.b"] = np.zeros(d, dtype)
        t[p + "w1"] = normal(d, f)
        t[p + "b1"] = np.zeros(f, dtype)
        t[p + "w2"] = normal(f, d)
        t[p + "b2"] = np.zeros(d, dtype)
        t[p + "ln2.g"] = np.ones(d, dtype)
        t[p + "ln2.b"] = np.zeros(d, dtype)
    t["heads.score.w"] = normal(d)
    t["heads.score.b"] = np.zeros(1, dtype)
    t["heads.span.w"] = normal(d, 2)
    t["heads.span.b"] = np.zeros(2, dtype)
    return ModelParameters(config=config, tensors=t)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return np.ascontiguousarray(x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, l, h * dh)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one flat GEMM instead of a batch-strided loop
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(*x.shape[:-1], w.shape[1])


def forward_with_cache(
    params: ModelParameters,
    ids: np.ndarray,
    attn_mask: np.ndarray,
    train_mode: bool = False,
    dropout_rng: DropoutRng | None = None,
):
    """Batched forward pass; returns (H [B,L,D], cache for the backward pass)."""
    cfg = params.config
    t = params.tensors
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ValueError("token id out of range for vocab_size")
    b, l = ids.shape
    if l > cfg.max_seq_len:
        raise ValueError(f"sequence length {l} exceeds max_seq_len {cfg.max_seq_len}")
    attn_mask = np.ascontiguousarray(attn_mask, dtype=bool)

    rate = cfg.dropout_rate if train_mode else 0.0
    if rate > 0.0 and dropout_rng is None:
        raise ValueError("train_mode with dropout requires a DropoutRng")
    keep = 1.0 - rate

    def dropout(x: np.ndarray):
        if rate == 0.0:
            return x, None
        m = dropout_rng.mask(x.shape, rate)
        return x * m / keep, m

    e0 = t["emb"][ids] + t["pos"][:l]
    x, m_e = dropout(e0)
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)

    layers = []
    for i in range(cfg.n_layers):
        p = f"l{i}."
        x_in = x
        q = _split_heads(_linear(x_in, t[p + "wq"], t[p + "bq"]), cfg.n_heads)
        k = _split_heads(_linear(x_in, t[p + "wk"], t[p + "bk"]), cfg.n_heads)
        v = _split_heads(_linear(x_in, t[p + "wv"], t[p + "bv"]), cfg.n_heads)
        s = q @ k.swapaxes(-1, -2)
        s *= s.dtype.type(scale)
        a = kernels.masked_softmax(s, attn_mask)  # consumes s
        c = _merge_heads(a @ v)
        o = _linear(c, t[p + "wo"], t[p + "bo"])
        o_drop, m_o = dropout(o)
        x1, xhat1, inv1 = kernels.layer_norm(x_in + o_drop, t[p + "ln1.g"], t[p + "ln1.b"], _LN_EPS)
        u = _linear(x1, t[p + "w1"], t[p + "b1"])
        g_act, phi = kernels.gelu_forward(u)
        f = _linear(g_act, t[p + "w2"], t[p + "b2"])
        f_drop, m_f = dropout(f)
        x2, xhat2, inv2 = kernels.layer_norm(x1 + f_drop, t[p + "ln2.g"], t[p + "ln2.b"], _LN_EPS)
        if not np.all(np.isfinite(x2)):
            raise FloatingPointError(f"non-finite activations leaving encoder layer {i}")
        layers.append(
            dict(x_in=x_in, q=q, k=k, v=v, a=a, c=c, m_o=m_o, xhat1=xhat1, inv1=inv1,
                 x1=x1, u=u, phi=phi, g_act=g_act, m_f=m_f, xhat2=xhat2, inv2=inv2)
        )
        x = x2

    cache = dict(ids=ids, attn_mask=attn_mask, m_e=m_e, layers=layers, rate=rate, scale=scale, seq_len=l)
    return x, cache


def backward_from_cache(params: ModelParameters, cache: dict, d_h: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter tensor given dLoss/dH from a cached forward."""
    cfg = params.config
    t = params.tensors
    grads = params.zeros_like()
    rate, scale, l = cache["rate"], cache["scale"], cache["seq_len"]
    keep = 1.0 - rate

    def drop_back(dy: np.ndarray, m) -> np.ndarray:
        return dy if m is None else dy * m / keep

    dx = d_h.astype(params.dtype, copy=False)
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        lay = cache["layers"][i]
        d = cfg.d_model

        dr2, dg2, db2 = kernels.layer_norm_backward(dx, t[p + "ln2.g"], lay["xhat2"], lay["inv2"])
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        dx1 = dr2.copy()
        df = drop_back(dr2, lay["m_f"])
        df2 = df.reshape(-1, d)
        grads[p + "w2"] += lay["g_act"].reshape(-1, cfg.d_ff).T @ df2
        grads[p + "b2"] += df2.sum(0)
        dg_act = df2 @ t[p + "w2"].T
        du = kernels.gelu_backward(dg_act.reshape(df.shape[:-1] + (cfg.d_ff,)), lay["u"], lay["phi"])
        du2 = du.reshape(-1, cfg.d_ff)
        grads[p + "w1"] += lay["x1"].reshape(-1, d).T @ du2
        grads[p + "b1"] += du2.sum(0)
        dx1 += (du2 @ t[p + "w1"].T).reshape(dx1.shape)

        dr1, dg1, db1 = kernels.layer_norm_backward(dx1, t[p + "ln1.g"], lay["xhat1"], lay["inv1"])
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        dx_in = dr1.copy()
        do = drop_back(dr1, lay["m_o"])
        do2 = do.reshape(-1, d)
        grads[p + "wo"] += lay["c"].reshape(-1, d).T @ do2
        grads[p + "bo"] += do2.sum(0)
        dc = do2 @ t[p + "wo"].T
        dctx = _split_heads(dc.reshape(do.shape[:-1] + (d,)), cfg.n_heads)
        da = dctx @ lay["v"].swapaxes(-1, -2)
        dv = lay["a"].swapaxes(-1, -2) @ dctx
        ds = kernels.softmax_backward(da, lay["a"])  # consumes da
        ds *= ds.dtype.type(scale)
        dq = ds @ lay["k"]
        dk = ds.swapaxes(-1, -2) @ lay["q"]
        x_in2 = lay["x_in"].reshape(-1, d)
        for name, dh in (("wq", dq), ("wk", dk), ("wv", dv)):
            dm2 = _merge_heads(dh).reshape(-1, d)
            grads[p + name] += x_in2.T @ dm2
            grads[p + "b" + name[1]] += dm2.sum(0)
            dx_in += (dm2 @ t[p + name].T).reshape(dx_in.shape)
        dx = dx_in

    de0 = drop_back(dx, cache["m_e"])
    grads["pos"][:l] += de0.sum(0)
    kernels.scatter_add(grads["emb"], cache["ids"].reshape(-1), de0.reshape(-1, cfg.d_model))
    return grads


def encode(
    params: ModelParameters,
    packed: PackedInput,
    train_mode: bool = False,
    dropout_rng: DropoutRng | None = None,
) -> np.ndarray:
    """Contextual vectors for one packed pair: H [L, d_model], H[0] = CLS."""
    ids, attn = pad_batch([packed])
    h, _ = forward_with_cache(params, ids, attn, train_mode, dropout_rng)
    return h[0]


def encode_batch(
    params: ModelParameters,
    packed: Sequence[PackedInput],
    train_mode: bool = False,
    dropout_rng: DropoutRng | None = None,
):
    ids, attn = pad_batch(packed)
    return forward_with_cache(params, ids, attn, train_mode, dropout_rng)


def encode_backward(
    params: ModelParameters,
    packed: PackedInput,
    upstream_gradients: np.ndarray,
    train_mode: bool = False,
    dropout_rng: DropoutRng | None = None,
) -> dict[str, np.ndarray]:
    """dLoss/dParams for a single pair, given dLoss/dH (shape [L, d_model])."""
    upstream = np.asarray(upstream_gradients, dtype=np.float64)
    if upstream.shape != (len(packed), params.config.d_model):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"H shape {(len(packed), params.config.d_model)}"
        )
    ids, attn = pad_batch([packed])
    _, cache = forward_with_cache(params, ids, attn, train_mode, dropout_rng)
    return backward_from_cache(params, cache, upstream[None, :, :])


# ---------------------------------------------------------------------------
# Checkpoints: magic "MIXCKPT1", config header, then named float64 tensors.
# The vocabulary is saved alongside as "<path>.vocab", one token per line.
# ---------------------------------------------------------------------------


def vocab_path_for(checkpoint_path: str | Path) -> Path:
    return Path(str(checkpoint_path) + ".vocab")


def save_checkpoint(params: ModelParameters, path: str | Path, vocab: Vocab | None = None) -> None:
    cfg = params.config
    out: list[bytes] = [CKPT_MAGIC]
    out.append(
        struct.pack(
            "<6qd",
            cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
            cfg.d_ff, cfg.max_seq_len, cfg.dropout_rate,
        )
    )
    names = sorted(params.tensors)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))
    if vocab is not None:
        vocab.save(vocab_path_for(path))


def load_checkpoint(path: str | Path) -> tuple[ModelParameters, Vocab | None]:
    buf = Path(path).read_bytes()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a MIXCKPT1 checkpoint (bad magic/version)")
    off = len(CKPT_MAGIC)
    vs, dm, nl, nh, dff, msl, rate = struct.unpack_from("<6qd", buf, off)
    off += struct.calcsize("<6qd")
    cfg = EncoderConfig(
        vocab_size=vs, d_model=dm, n_layers=nl, n_heads=nh,
        d_ff=dff, max_seq_len=msl, dropout_rate=rate,
    )
    (n_tensors,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}q", buf, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    params = ModelParameters(config=cfg, tensors=tensors)
    vpath = vocab_path_for(path)
    vocab = Vocab.load(vpath) if vpath.exists() else None
    return params, vocab
