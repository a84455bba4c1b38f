import math

import numpy as np
import pytest

from gnfzip import numerics as nx
from gnfzip.errors import BadContextLength, BadMagic, CheckpointError, ConfigError, HashMismatch
from gnfzip.geneformer import (GeneformerEntropyModel, GeneformerModel, ModelConfig, causal_mask,
                               checkpoint_fingerprint, count_params, load_checkpoint,
                               relative_attention, relative_positions, save_checkpoint, sinusoidal_pe)
from gnfzip.grouping import byte_group_reshape
from gnfzip.trainer import TrainConfig, train

from conftest import randomize, tiny_config
from oracles import attention_loop, predict_loop, sinusoid_scalar

# layer table of the reference model: (layer, width x length)
REFERENCE_TRACE = [
    ("1DConv", (768, 41)), ("Relu", (768, 41)), ("1DMaxPooling", (768, 13)),
    ("BatchNormalization", (768, 13)), ("Dropout(p=0.1)", (768, 13)),
    ("RelativeAttention", (768, 13)), ("LayerNorm", (768, 13)), ("Dropout(p=0.1)", (768, 13)),
    ("LayerNorm", (768, 13)), ("Linear", (3072, 13)), ("Linear", (768, 13)),
    ("Dropout(p=0.1)", (768, 13)), ("GELUActivation", (768, 13)), ("Dropout(p=0.1)", (768, 13)),
    ("Linear", (1, 4)),
]


def attn_params(rng, d, n_heads, dk, scale=0.4):
    return {
        "attn.wq": nx.Tensor(rng.normal(0, scale, (d, n_heads * dk))),
        "attn.wk": nx.Tensor(rng.normal(0, scale, (d, n_heads * dk))),
        "attn.wv": nx.Tensor(rng.normal(0, scale, (d, d))),
        "attn.wo": nx.Tensor(rng.normal(0, scale, (d, d))),
        "attn.u": nx.Tensor(rng.normal(0, scale, (n_heads, dk))),
        "attn.v": nx.Tensor(rng.normal(0, scale, (n_heads, dk))),
    }


def run_attention(x, mem, P, n_heads, dk, causal=True):
    m = None if mem is None else mem[None]
    return relative_attention(nx.Tensor(x[None]), m, P, n_heads, dk, causal=causal).data[0]


def test_sinusoid_examples():
    g0 = sinusoidal_pe(0, 16)
    assert g0.tolist() == [0.0, 1.0] * 8
    for i in (-7, 1, 5, 100):
        assert sinusoidal_pe(i, 16)[0] == pytest.approx(math.sin(i), abs=1e-15)
    table = sinusoidal_pe(np.arange(-300, 300), 32)
    assert np.abs(table).max() <= 1.0
    for i in (-3, 0, 11):
        ref = [sinusoid_scalar(i, a, 10) for a in range(10)]
        np.testing.assert_allclose(sinusoidal_pe(i, 10), ref, atol=1e-15)


def test_attention_matches_scalar_oracle(rng):
    configs = 0
    for n_heads in (1, 2, 4):
        for trial in range(18):
            d = n_heads * int(rng.integers(1, 5))
            dk = int(rng.integers(1, 4))
            n = int(rng.integers(1, 9))
            m = int(rng.choice([0, n, 2 * n]))
            P = attn_params(rng, d, n_heads, dk)
            x = rng.normal(size=(n, d))
            mem = rng.normal(size=(m, d)) if m else None
            got = run_attention(x, mem, P, n_heads, dk)
            raw = {k.split(".")[1]: t.data for k, t in P.items()}
            ref = attention_loop(x, mem, raw["wq"], raw["wk"], raw["wv"], raw["wo"], raw["u"], raw["v"],
                                 n_heads)
            assert np.abs(got - ref).max() < 1e-10, (n_heads, d, dk, n, m)
            configs += 1
    assert configs >= 50


def test_single_position_without_memory_attends_to_itself(rng):
    d = 6
    P = attn_params(rng, d, 2, 3)
    x = rng.normal(size=(1, d))
    out = run_attention(x, None, P, 2, 3)
    np.testing.assert_allclose(out, x @ P["attn.wv"].data @ P["attn.wo"].data, rtol=1e-12)


def test_causal_mask_blocks_future_positions(rng):
    d, n = 8, 6
    P = attn_params(rng, d, 2, 4)
    x = rng.normal(size=(n, d))
    mem = rng.normal(size=(n, d))
    base = run_attention(x, mem, P, 2, 4)
    for k in range(n):
        y = x.copy()
        y[k] += rng.normal(size=d)
        out = run_attention(y, mem, P, 2, 4)
        np.testing.assert_array_equal(out[:k], base[:k])
        assert not np.allclose(out[k:], base[k:])
    mask = causal_mask(3, 2)
    assert (mask[0, :3] == 0).all() and (mask[0, 3:] < -1e8).all()
    assert (mask[2] == 0).all()


def test_positional_scores_depend_only_on_offset(rng):
    d, n = 16, 7
    for m in (0, 3, 7):
        g = relative_positions(n, m, d, 1e4)
        assert g.shape == (n, m + n, d)
        for c in (1, 2):
            for i in range(n - c):
                for j in range(m + n - c):
                    assert np.array_equal(g[i + c, j + c], g[i, j])
    # scores of the positional term on a shifted sequence agree elementwise
    P = attn_params(rng, d, 1, 4)
    wq, wk, v = P["attn.wq"].data, P["attn.wk"].data, P["attn.v"].data[0]
    x = rng.normal(size=(n, d))
    pre = np.vstack([rng.normal(size=(3, d)), x])

    def pos_scores(seq):
        q = seq @ wq + v
        r = relative_positions(len(seq), 0, d, 1e4) @ wk
        return np.einsum("ic,ijc->ij", q, r)

    np.testing.assert_allclose(pos_scores(pre)[3:, 3:], pos_scores(x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kw", [
    {}, {"n_heads": 1}, {"embed_mode": "one-hot"}, {"latent_array": False},
    {"ngram": 2, "byte_group": 1, "d_model": 16, "n_heads": 4},
    {"segment_cut": False}, {"context_len": 8, "byte_group": 1, "conv_kernel": 2},
])
def test_predict_matches_scalar_oracle(rng, kw):
    model = randomize(GeneformerModel(tiny_config(**kw)), seed=3)
    c = model.config
    ctx = rng.integers(0, 4, c.context_len).astype(np.uint8)
    mem = rng.normal(size=(c.mem_len, c.d_model)) if c.latent_array else None
    probs, h = model.predict_next(ctx, mem)
    ref_p, ref_h = predict_loop(model, ctx, mem)
    assert np.abs(probs - ref_p).max() < 1e-8
    assert np.abs(h - ref_h).max() < 1e-8


def test_probabilities_are_a_distribution(rng):
    model = randomize(GeneformerModel(tiny_config()), seed=1, scale=1.0)
    for _ in range(20):
        p, _ = model.predict_next(rng.integers(0, 4, 16))
        assert abs(p.sum() - 1.0) < 1e-12 and (p > 0).all()


def test_zero_head_gives_uniform(rng):
    model = GeneformerModel(tiny_config())
    p, _ = model.predict_next(rng.integers(0, 4, 16))
    assert p.tolist() == [0.25] * 4


def test_bad_context_length(rng):
    model = GeneformerModel(tiny_config())
    with pytest.raises(BadContextLength):
        model.predict_next(rng.integers(0, 4, 15))
    with pytest.raises(BadContextLength):
        GeneformerEntropyModel(model).new_session(np.zeros(12, np.uint8))


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=66, n_heads=2, byte_group=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=16, n_heads=2, ngram=2, byte_group=4, embed_mode="one-hot")
    c = ModelConfig.full()
    assert (c.kernel, c.conv_len, c.pool, c.n_pos) == (24, 41, (3, 3), 13)
    assert ModelConfig.from_json(c.to_json()) == c


def test_reference_layer_shapes():
    model = GeneformerModel(ModelConfig.full())
    assert model.shape_trace() == REFERENCE_TRACE


def test_parameter_counts():
    c = ModelConfig.full()
    model = GeneformerModel(c, init=False)
    ff = sum(model.params[k].size for k in ("ff1.weight", "ff1.bias", "ff2.weight", "ff2.bias"))
    assert ff == 768 * 3072 + 3072 + 3072 * 768 + 768 == 4_722_432
    head = model.params["head.weight"].size + model.params["head.bias"].size
    assert head == 13 * 768 * 4 + 4 == 39_940
    assert count_params(c) == model.count_params()
    for kw in ({}, {"embed_mode": "one-hot"}, {"ngram": 2, "byte_group": 1, "d_model": 16, "n_heads": 4}):
        small = GeneformerModel(tiny_config(**kw))
        assert count_params(small.config) == small.count_params()


def test_embedding_shapes(rng):
    c = ModelConfig(ngram=2, byte_group=4)
    assert (c.vocab, c.embed_dim, c.n_tokens) == (16, 192, 32)
    w = nx.Tensor(rng.normal(size=(16, 192)))
    tokens = rng.integers(0, 16, 32)
    tokens[5] = tokens[9]
    emb = nx.embedding(w, tokens)
    assert emb.shape == (32, 192)
    assert np.array_equal(emb.data[5], emb.data[9])
    assert byte_group_reshape(emb, 4).shape == (8, 768)
    for mode in ("learned", "one-hot"):
        m = GeneformerModel(tiny_config(embed_mode=mode, ngram=1, byte_group=2))
        assert m.config.embed_dim == 4
        x = m.features(rng.integers(0, 4, (3, 16)))
        assert x.shape == (3, m.config.n_pos, 8)


def test_encoder_output_shape_and_memory_effect(rng):
    model = randomize(GeneformerModel(tiny_config()), seed=5)
    c = model.config
    ctx = rng.integers(0, 4, (1, c.context_len))
    p1, h1 = model.predict_proba(ctx)
    assert h1.shape == (1, c.n_pos, c.d_model)
    assert model.next_memory(None, h1).shape == (1, c.mem_len, c.d_model)
    p2, h2 = model.predict_proba(ctx, model.next_memory(None, h1))
    assert not np.allclose(h1, h2)
    assert not np.allclose(p1, p2)


def test_uncut_memory_slides(rng):
    model = randomize(GeneformerModel(tiny_config(segment_cut=False)), seed=5)
    c = model.config
    mem = model.initial_memory(2)
    assert mem.shape == (2, c.n_pos * 3, c.d_model)
    for _ in range(4):
        _, h = model.predict_proba(rng.integers(0, 4, (2, c.context_len)), mem)
        nxt = model.next_memory(mem, h)
        assert nxt.shape == mem.shape
        np.testing.assert_array_equal(nxt[:, :-c.n_pos], mem[:, c.n_pos:])
        np.testing.assert_array_equal(nxt[:, -c.n_pos:], h)
        mem = nxt


def test_no_gradient_through_latent_array(rng):
    model = randomize(GeneformerModel(tiny_config()), seed=2)
    c = model.config
    params = model.parameters()
    ctx1, ctx2 = rng.integers(0, 4, (2, 1, c.context_len))
    _, h_const = model.forward(ctx1)
    mem = nx.Tensor(h_const.data.copy(), requires_grad=True)
    with nx.Tape() as tape:
        _, h1 = model.forward(ctx1)
        logits, _ = model.forward(ctx2, h1)
        loss, _ = nx.cross_entropy(logits, [1])
    through = tape.backward(loss, params)
    nx.zero_grad(params)
    with nx.Tape() as tape:
        logits, _ = model.forward(ctx2, mem)
        loss, _ = nx.cross_entropy(logits, [1])
    grads = tape.backward(loss, params + [mem])
    assert not grads[-1].any()
    for a, b in zip(through, grads[:-1]):
        np.testing.assert_array_equal(a, b)


def test_batch_rows_match_single_predictions(rng):
    model = randomize(GeneformerModel(ModelConfig.toy()), seed=4, scale=0.05)
    c = model.config
    ctx = rng.integers(0, 4, (7, c.context_len))
    mem = rng.normal(size=(7, c.mem_len, c.d_model))
    p, h = model.predict_proba(ctx, mem)
    for i in range(7):
        pi, hi = model.predict_proba(ctx[i:i + 1], mem[i:i + 1])
        assert np.array_equal(p[i], pi[0]) and np.array_equal(h[i], hi[0])


def test_prediction_is_deterministic(rng):
    model = randomize(GeneformerModel(tiny_config()), seed=4)
    ctx = rng.integers(0, 4, 16)
    a = model.predict_next(ctx)
    b = load_checkpoint(save_checkpoint(model)).predict_next(ctx)
    c = load_checkpoint(save_checkpoint(model)).predict_next(ctx)
    assert np.array_equal(b[0], c[0]) and np.array_equal(b[1], c[1])
    assert np.array_equal(a[0], model.predict_next(ctx)[0])


def test_checkpoint_round_trip():
    model = randomize(GeneformerModel(tiny_config(embed_mode="one-hot")), seed=8)
    blob = save_checkpoint(model)
    again = load_checkpoint(blob)
    assert again.config == model.config
    assert save_checkpoint(again) == blob
    model.round_to_float32()
    for k, t in model.params.items():
        assert np.array_equal(again.params[k].data, t.data), k
    for k, b in model.buffers.items():
        assert np.array_equal(again.buffers[k], b)


def test_checkpoint_damage_is_rejected():
    blob = save_checkpoint(randomize(GeneformerModel(tiny_config()), seed=8))
    for cut in (0, 3, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises((BadMagic, HashMismatch)):
            load_checkpoint(blob[:cut])
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 1
    with pytest.raises(HashMismatch):
        load_checkpoint(bytes(bad))
    with pytest.raises(BadMagic):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:4] + b"\x09\x00" + blob[6:])


def test_fingerprint_tracks_every_parameter():
    model = randomize(GeneformerModel(tiny_config()), seed=9)
    base = checkpoint_fingerprint(save_checkpoint(model))
    seen = {base}
    for name, t in model.params.items():
        old = t.data.copy()
        t.data.reshape(-1)[-1] += 0.125
        fp = checkpoint_fingerprint(save_checkpoint(model))
        assert fp not in seen, name
        seen.add(fp)
        t.data = old
    assert checkpoint_fingerprint(save_checkpoint(model)) == base
    assert GeneformerEntropyModel(model).fingerprint() == base


def test_toy_training_learns_periodic_sequence():
    # byte_group 1: with 2-base grouping a stride-2 max-pool cannot tell phase 0 from phase 2
    cfg = tiny_config(d_model=16, d_ff=32, n_heads=2, dropout=0.0, byte_group=1)
    model = GeneformerModel(cfg)
    seqs = [np.tile(np.array([0, 1, 2, 3], np.uint8), 60) for _ in range(4)]
    result = train(seqs, model, TrainConfig(batch_size=16, lr=3e-3, epochs=4, seed=1))
    best = result.model
    em = GeneformerEntropyModel(best)
    period = np.tile(np.array([0, 1, 2, 3], np.uint8), 4)
    for shift in range(4):
        s = em.new_session(np.roll(period, -shift))
        for step in range(8):
            p = em.predict([s])[0]
            want = (shift + step) % 4
            assert p[want] > 0.9, (shift, step, p)
            s.advance(want)
