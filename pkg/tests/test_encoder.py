"""Packing layout, forward-pass invariants (masking, layer norm, attention
normalization, batch invariance), backward correctness against finite
differences, and checkpoint round-trips."""
import numpy as np
import pytest

from mixqa import kernels
from mixqa.encoder import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    DropoutRng,
    EncoderConfig,
    ModelParameters,
    Vocab,
    backward_from_cache,
    encode,
    encode_backward,
    encode_batch,
    forward_with_cache,
    init_parameters,
    load_checkpoint,
    pack,
    pad_batch,
    save_checkpoint,
)

TINY = EncoderConfig(vocab_size=19, d_model=8, n_layers=2, n_heads=2, d_ff=12,
                     max_seq_len=32, dropout_rate=0.0)


def rand_ids(rng, n):
    return rng.integers(4, TINY.vocab_size, n)


class TestPack:
    def test_layout(self):
        q = np.arange(4, 8)
        p = np.arange(8, 18)
        packed = pack(q, p, TINY)
        assert len(packed) == 17
        assert packed.token_ids[0] == CLS_ID
        assert packed.token_ids[5] == SEP_ID and packed.token_ids[-1] == SEP_ID
        assert packed.paragraph_mask.sum() == 10
        assert packed.paragraph_start == 6

    def test_truncates_paragraph_only(self):
        q = np.arange(4, 10)  # 6 question tokens
        p = np.full(TINY.max_seq_len, 5)
        packed = pack(q, p, TINY)
        assert packed.paragraph_len == TINY.max_seq_len - 6 - 3
        assert len(packed) == TINY.max_seq_len
        assert list(packed.token_ids[1:7]) == list(q)

    def test_empty_paragraph(self):
        packed = pack(np.array([4, 5]), np.zeros(0, dtype=np.int64), TINY)
        assert list(packed.token_ids) == [CLS_ID, 4, 5, SEP_ID, SEP_ID]
        assert not packed.paragraph_mask.any()

    def test_question_too_long(self):
        with pytest.raises(ValueError, match="question"):
            pack(np.full(TINY.max_seq_len - 2, 4), np.array([5]), TINY)


class TestForward:
    def test_eval_deterministic(self):
        rng = np.random.default_rng(0)
        params = init_parameters(TINY, 1)
        packed = pack(rand_ids(rng, 4), rand_ids(rng, 9), TINY)
        h1 = encode(params, packed)
        h2 = encode(params, packed)
        np.testing.assert_array_equal(h1, h2)
        assert h1.shape == (len(packed), TINY.d_model)

    def test_padding_content_is_ignored(self):
        # swap garbage ids between two padded slots: real outputs unchanged
        rng = np.random.default_rng(1)
        params = init_parameters(TINY, 2)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 5), TINY)
        ids, attn = pad_batch([packed])
        ids = np.concatenate([ids, [[7, 9]]], axis=1)
        attn = np.concatenate([attn, [[False, False]]], axis=1)
        h1, _ = forward_with_cache(params, ids, attn)
        ids2 = ids.copy()
        ids2[0, -2], ids2[0, -1] = ids[0, -1], ids[0, -2]
        h2, _ = forward_with_cache(params, ids2, attn)
        real = attn[0]
        np.testing.assert_allclose(h1[0][real], h2[0][real], atol=1e-6)

    def test_batch_invariance(self):
        rng = np.random.default_rng(2)
        params = init_parameters(TINY, 3)
        singles = [pack(rand_ids(rng, 3), rand_ids(rng, int(n)), TINY) for n in rng.integers(2, 12, 5)]
        alone = [encode(params, p) for p in singles]
        h, _ = encode_batch(params, singles)
        for i, p in enumerate(singles):
            np.testing.assert_allclose(h[i, : len(p)], alone[i], atol=1e-6)

    def test_attention_rows_sum_to_one_over_real_keys(self):
        rng = np.random.default_rng(3)
        params = init_parameters(TINY, 4)
        packed = [pack(rand_ids(rng, 3), rand_ids(rng, 9), TINY),
                  pack(rand_ids(rng, 3), rand_ids(rng, 4), TINY)]
        ids, attn = pad_batch(packed)
        _, cache = forward_with_cache(params, ids, attn)
        for lay in cache["layers"]:
            a = lay["a"]
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
            assert np.all(a[:, :, :, ~attn[1]][1] == 0.0)  # no weight on padding

    def test_layer_norm_output_standardized(self):
        rng = np.random.default_rng(4)
        params = init_parameters(TINY, 5)
        packed = pack(rand_ids(rng, 4), rand_ids(rng, 10), TINY)
        ids, attn = pad_batch([packed])
        _, cache = forward_with_cache(params, ids, attn)
        for lay in cache["layers"]:
            for xhat in (lay["xhat1"], lay["xhat2"]):
                assert np.abs(xhat.mean(-1)).max() < 1e-6
                assert np.abs(xhat.var(-1) - 1.0).max() < 1e-4

    def test_zero_attention_output_reduces_to_ffn_path(self):
        # with wo = bo = 0 each block is x -> LN2(LN1(x) + FFN(LN1(x)));
        # verify against an independent reference implementation
        rng = np.random.default_rng(5)
        cfg = EncoderConfig(vocab_size=19, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                            max_seq_len=32, dropout_rate=0.0)
        params = init_parameters(cfg, 6)
        params.tensors["l0.wo"][:] = 0.0
        params.tensors["l0.bo"][:] = 0.0
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 7), cfg)
        got = encode(params, packed)

        from scipy.special import erf
        t = params.tensors
        def ln(x, g, b):
            mu = x.mean(-1, keepdims=True)
            v = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(v + 1e-12) * g + b
        x = t["emb"][packed.token_ids] + t["pos"][: len(packed)]
        x1 = ln(x, t["l0.ln1.g"], t["l0.ln1.b"])
        u = x1 @ t["l0.w1"] + t["l0.b1"]
        gelu = u * 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
        x2 = ln(x1 + gelu @ t["l0.w2"] + t["l0.b2"], t["l0.ln2.g"], t["l0.ln2.b"])
        np.testing.assert_allclose(got, x2, atol=1e-9)

    def test_full_layer_against_looped_reference(self):
        # independent single-layer forward: explicit per-head python loops
        rng = np.random.default_rng(6)
        cfg = EncoderConfig(vocab_size=19, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                            max_seq_len=32, dropout_rate=0.0)
        params = init_parameters(cfg, 7)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 6), cfg)
        got = encode(params, packed)

        from scipy.special import erf
        t = params.tensors
        def ln(x, g, b):
            mu = x.mean(-1, keepdims=True)
            v = ((x - mu) ** 2).mean(-1, keepdims=True)
            return (x - mu) / np.sqrt(v + 1e-12) * g + b
        x = t["emb"][packed.token_ids] + t["pos"][: len(packed)]
        L, d, dh = len(packed), cfg.d_model, cfg.d_model // cfg.n_heads
        q = x @ t["l0.wq"] + t["l0.bq"]
        k = x @ t["l0.wk"] + t["l0.bk"]
        v = x @ t["l0.wv"] + t["l0.bv"]
        ctx = np.zeros((L, d))
        for head in range(cfg.n_heads):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(L):
                logits = np.array([q[i, sl] @ k[j, sl] for j in range(L)]) / np.sqrt(dh)
                w = np.exp(logits - logits.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
        x1 = ln(x + ctx @ t["l0.wo"] + t["l0.bo"], t["l0.ln1.g"], t["l0.ln1.b"])
        u = x1 @ t["l0.w1"] + t["l0.b1"]
        gelu = u * 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
        ref = ln(x1 + gelu @ t["l0.w2"] + t["l0.b2"], t["l0.ln2.g"], t["l0.ln2.b"])
        np.testing.assert_allclose(got, ref, atol=1e-8)

    def test_rejects_out_of_range_ids(self):
        params = init_parameters(TINY, 8)
        ids = np.array([[CLS_ID, TINY.vocab_size, SEP_ID]])
        with pytest.raises(ValueError, match="vocab"):
            forward_with_cache(params, ids, np.ones_like(ids, dtype=bool))

    def test_nonfinite_aborts_with_layer(self):
        params = init_parameters(TINY, 9)
        params.tensors["l1.w2"][0, 0] = np.inf
        rng = np.random.default_rng(10)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 4), TINY)
        with pytest.raises(FloatingPointError, match="layer 1"):
            encode(params, packed)


class TestDropout:
    def test_counter_stream_reproducible(self):
        a = DropoutRng(42)
        b = DropoutRng(42)
        for shape in ((3, 4), (2, 2, 2), (5,)):
            np.testing.assert_array_equal(a.mask(shape, 0.3), b.mask(shape, 0.3))
        c = DropoutRng(43)
        assert not np.array_equal(DropoutRng(42).mask((64,), 0.3), c.mask((64,), 0.3))

    def test_train_mode_reproducible_forward(self):
        rng = np.random.default_rng(11)
        cfg = EncoderConfig(vocab_size=19, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                            max_seq_len=32, dropout_rate=0.3)
        params = init_parameters(cfg, 12)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 6), cfg)
        h1 = encode(params, packed, train_mode=True, dropout_rng=DropoutRng(5))
        h2 = encode(params, packed, train_mode=True, dropout_rng=DropoutRng(5))
        h3 = encode(params, packed, train_mode=True, dropout_rng=DropoutRng(6))
        np.testing.assert_array_equal(h1, h2)
        assert not np.array_equal(h1, h3)

    def test_train_mode_requires_rng(self):
        cfg = EncoderConfig(vocab_size=19, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                            max_seq_len=32, dropout_rate=0.3)
        params = init_parameters(cfg, 13)
        packed = pack(np.array([4]), np.array([5, 6]), cfg)
        with pytest.raises(ValueError, match="DropoutRng"):
            encode(params, packed, train_mode=True)


def fd_check(params, packed_list, loss_from_h, grads, floor=1e-5, h=1e-5, samples=None):
    """Compare analytic grads to central differences on (a sample of) params."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        idxs = range(flat.size) if samples is None else rng.choice(flat.size, min(samples, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_from_h()
            flat[i] = orig - h
            lm = loss_from_h()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(14)
        params = init_parameters(TINY, 15)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 5), TINY)
        grads = encode_backward(params, packed, np.zeros((len(packed), TINY.d_model)))
        for name, g in grads.items():
            assert not g.any(), name

    def test_shape_mismatch_rejected(self):
        params = init_parameters(TINY, 16)
        packed = pack(np.array([4, 5]), np.array([6, 7, 8]), TINY)
        with pytest.raises(ValueError, match="shape"):
            encode_backward(params, packed, np.zeros((2, TINY.d_model)))

    def test_padding_embedding_gets_no_gradient(self):
        rng = np.random.default_rng(17)
        params = init_parameters(TINY, 18)
        packed = [pack(rand_ids(rng, 3), rand_ids(rng, 8), TINY),
                  pack(rand_ids(rng, 3), rand_ids(rng, 3), TINY)]
        ids, attn = pad_batch(packed)
        assert (ids == PAD_ID).any()
        h, cache = forward_with_cache(params, ids, attn)
        d_h = np.random.default_rng(19).normal(size=h.shape)
        d_h[~attn] = 0.0  # loss reads only real positions
        grads = backward_from_cache(params, cache, d_h)
        assert not grads["emb"][PAD_ID].any()

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(20)
        params = init_parameters(TINY, 21)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 6), TINY)
        ids, attn = pad_batch([packed])
        r = rng.normal(size=(1, len(packed), TINY.d_model))

        def loss():
            h, _ = forward_with_cache(params, ids, attn)
            return float((h * r).sum())

        h, cache = forward_with_cache(params, ids, attn)
        grads = backward_from_cache(params, cache, r.copy())
        worst = fd_check(params, [packed], loss, grads, samples=30)
        assert worst < 1e-4

    def test_train_mode_backward_matches_fd_through_dropout(self):
        # fixed masks (same counter stream) make the dropped net differentiable
        rng = np.random.default_rng(22)
        cfg = EncoderConfig(vocab_size=19, d_model=8, n_layers=1, n_heads=2, d_ff=12,
                            max_seq_len=32, dropout_rate=0.25)
        params = init_parameters(cfg, 23)
        packed = pack(rand_ids(rng, 3), rand_ids(rng, 5), cfg)
        ids, attn = pad_batch([packed])
        r = rng.normal(size=(1, len(packed), cfg.d_model))

        def loss():
            h, _ = forward_with_cache(params, ids, attn, True, DropoutRng(9))
            return float((h * r).sum())

        h, cache = forward_with_cache(params, ids, attn, True, DropoutRng(9))
        grads = backward_from_cache(params, cache, r.copy())
        worst = fd_check(params, [packed], loss, grads, samples=20)
        assert worst < 1e-4


class TestKernelPathParity:
    def test_numpy_twins_match_active_path(self):
        rng = np.random.default_rng(24)
        s = rng.normal(size=(2, 2, 6, 6))
        mask = np.ones((2, 6), dtype=bool)
        mask[1, 4:] = False
        a_active = kernels.masked_softmax(s.copy(), mask)
        a_numpy = s.copy()
        kernels.masked_softmax_numpy(a_numpy, mask)
        np.testing.assert_allclose(a_active, a_numpy, atol=1e-12)

        da = rng.normal(size=s.shape)
        ds_active = kernels.softmax_backward(da.copy(), a_active)
        ds_numpy = da.copy()
        kernels.softmax_backward_numpy(ds_numpy, a_active)
        np.testing.assert_allclose(ds_active, ds_numpy, atol=1e-12)

        u = rng.normal(size=(3, 5, 7))
        out_a, phi_a = kernels.gelu_forward(u)
        out_n, phi_n = kernels.gelu_forward_numpy(u)
        np.testing.assert_allclose(out_a, out_n, atol=1e-12)
        np.testing.assert_allclose(phi_a, phi_n, atol=1e-12)

        g = np.ones(7)
        b = np.zeros(7)
        y_a, xh_a, inv_a = kernels.layer_norm(u, g, b, 1e-12)
        y_n, xh_n, inv_n = kernels.layer_norm_numpy(u, g, b, 1e-12)
        np.testing.assert_allclose(y_a, y_n, atol=1e-12)
        dy = rng.normal(size=u.shape)
        dx_a, dg_a, db_a = kernels.layer_norm_backward(dy, g, xh_a, inv_a)
        dx_n, dg_n, db_n = kernels.layer_norm_backward_numpy(dy, g, xh_n, inv_n)
        np.testing.assert_allclose(dx_a, dx_n, atol=1e-12)
        np.testing.assert_allclose(dg_a, dg_n, atol=1e-12)
        np.testing.assert_allclose(db_a, db_n, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_parameters(TINY, 30)
        vocab = Vocab.build(["cat", "dog", "owl"])
        path = tmp_path / "model.ckpt"
        save_checkpoint(params, path, vocab)
        loaded, loaded_vocab = load_checkpoint(path)
        assert loaded.config == TINY
        assert loaded_vocab.tokens == vocab.tokens
        for name, arr in params.tensors.items():
            np.testing.assert_array_equal(arr, loaded.tensors[name])

    def test_vocab_line_number_is_id(self, tmp_path):
        vocab = Vocab.build(["beta", "alpha"])
        vocab.save(tmp_path / "v.txt")
        lines = (tmp_path / "v.txt").read_text().splitlines()
        assert lines[:4] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
        assert lines[vocab.id("alpha")] == "alpha"

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"JUNKJUNK" + b"\x00" * 40)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_save_deterministic(self, tmp_path):
        a = init_parameters(TINY, 31)
        b = init_parameters(TINY, 31)
        pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, pa)
        save_checkpoint(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_unknown_token_maps_to_unk(self):
        vocab = Vocab.build(["cat"])
        ids = vocab.encode(["cat", "zebra"])
        assert ids[0] == vocab.id("cat") and ids[1] == 1
