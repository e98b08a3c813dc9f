import math

import numpy as np
import pytest

from spatialvl import NumericError, ValidationError
from spatialvl.model import (
    ModelConfig,
    SequenceInput,
    backward,
    check_params,
    collate,
    embed,
    forward,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    zero_grads,
)
from spatialvl.model import heads
from spatialvl.model.checkpoint import read_manifest
from spatialvl.text import encode_sequence


def make_input(rng, nq=3, na=2, k=4, d_v=8, vocab=20, **masks):
    seq = encode_sequence(list(rng.integers(6, vocab, nq)), list(rng.integers(6, vocab, na)), k)
    xy = rng.uniform(0, 0.5, (k, 2))
    wh = rng.uniform(0.1, 0.4, (k, 2))
    pos = np.hstack([xy, xy + wh, (wh[:, 0] * wh[:, 1])[:, None]])
    return SequenceInput(seq, pos, rng.normal(size=(k, d_v)), **masks)


def cfg_small(**kw):
    base = dict(vocab_size=20, num_categories=5, feature_dim=8, hidden=16, layers=2, heads=4, ffn=32,
                max_text=16, max_visual=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def randomized_params(cfg, rng):
    p = init_params(cfg, rng)
    for k, v in p.items():
        v += rng.normal(0, 0.3, v.shape)
    return p


def reference_forward(P, cfg, it):
    """Straight-line single-sequence forward: explicit per-slot embedding and loops."""
    s = it.seq
    T = len(s)
    H, A = cfg.hidden, cfg.heads
    dh = H // A

    def ln(x, g, b):
        m = x.mean()
        v = ((x - m) ** 2).mean()
        return (x - m) / math.sqrt(v + cfg.ln_eps) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    x = np.zeros((T, H))
    for t in range(T):
        if s.is_visual[t]:
            k = s.object_index[t]
            feat = np.zeros(cfg.feature_dim) if k in it.feature_masked else it.features[k]
            e = feat @ P["vis_feat.W"] + P["vis_feat.b"] + P["type_emb"][s.type_ids[t]]
            if k not in it.position_masked:
                e = e + it.positions[k] @ P["vis_pos.W"] + P["vis_pos.b"]
            x[t] = ln(e, P["ln_vis.g"], P["ln_vis.b"])
        else:
            tok = 3 if t in it.mlm_slots else s.token_ids[t]
            e = P["tok_emb"][tok] + P["pos_emb"][s.text_positions[t]] + P["type_emb"][s.type_ids[t]]
            x[t] = ln(e, P["ln_txt.g"], P["ln_txt.b"])
    for l in range(cfg.layers):
        pre = f"layer{l}."
        h = np.stack([ln(x[t], P[pre + "ln1.g"], P[pre + "ln1.b"]) for t in range(T)])
        q = h @ P[pre + "Wq"] + P[pre + "bq"]
        k_ = h @ P[pre + "Wk"] + P[pre + "bk"]
        v = h @ P[pre + "Wv"] + P[pre + "bv"]
        ctx = np.zeros((T, H))
        for a in range(A):
            sl = slice(a * dh, (a + 1) * dh)
            for i in range(T):
                sc = np.array([q[i, sl] @ k_[j, sl] / math.sqrt(dh) for j in range(T)])
                w = np.exp(sc - sc.max())
                w /= w.sum()
                ctx[i, sl] = w @ v[:, sl]
        x = x + ctx @ P[pre + "Wo"] + P[pre + "bo"]
        h2 = np.stack([ln(x[t], P[pre + "ln2.g"], P[pre + "ln2.b"]) for t in range(T)])
        x = x + gelu(h2 @ P[pre + "W1"] + P[pre + "b1"]) @ P[pre + "W2"] + P[pre + "b2"]
    return np.stack([ln(x[t], P["ln_f.g"], P["ln_f.b"]) for t in range(T)])


class TestForward:
    def test_matches_reference(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        items = [make_input(rng, 3, 2, 4), make_input(rng, 1, 1, 2, mlm_slots=(1,)),
                 make_input(rng, 2, 0, 3, feature_masked=(0,), position_masked=(2,))]
        trace = forward(P, collate(items, 8), cfg)
        for b, it in enumerate(items):
            n = len(it.seq)
            np.testing.assert_allclose(trace.hidden[b, :n], reference_forward(P, cfg, it), atol=1e-10)

    def test_single_layer_single_head(self, rng):
        cfg = cfg_small(layers=1, heads=1)
        P = randomized_params(cfg, rng)
        it = make_input(rng, 1, 0, 1)  # [CLS] w [IMG] v [SEP]
        trace = forward(P, collate([it], 8), cfg)
        np.testing.assert_allclose(trace.hidden[0], reference_forward(P, cfg, it), atol=1e-10)

    def test_attention_rows_normalised(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        trace = forward(P, collate([make_input(rng, 5, 2, 6), make_input(rng, 1, 0, 2)], 8), cfg)
        for att in trace.attentions:
            np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-6)
            assert att.min() >= 0

    def test_padding_does_not_leak(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        a = make_input(rng, 1, 1, 2)
        alone = forward(P, collate([a], 8), cfg).hidden[0]
        padded = forward(P, collate([a, make_input(rng, 6, 3, 7)], 8), cfg).hidden[0, : len(a.seq)]
        np.testing.assert_allclose(padded, alone, atol=1e-12)

    def test_position_masked_box_is_invisible(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        it = make_input(rng, position_masked=(1,))
        moved_pos = it.positions.copy()
        moved_pos[1] = [0.9, 0.8, 0.95, 0.99, 0.05 * 0.19]
        moved = SequenceInput(it.seq, moved_pos, it.features, position_masked=(1,))
        h1 = forward(P, collate([it], 8), cfg).hidden
        h2 = forward(P, collate([moved], 8), cfg).hidden
        assert np.array_equal(h1, h2)

    def test_unmasked_boxes_change_embedding(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        it = make_input(rng)
        other = it.positions.copy()
        other[0] = [0.6, 0.6, 0.9, 0.9, 0.09]
        x1, _, _ = embed(P, collate([it], 8), cfg)
        x2, _, _ = embed(P, collate([SequenceInput(it.seq, other, it.features)], 8), cfg)
        slot = it.seq.img_slot + 1
        assert not np.allclose(x1[0, slot], x2[0, slot])
        np.testing.assert_array_equal(np.delete(x1[0], slot, 0), np.delete(x2[0], slot, 0))

    def test_permuting_objects_permutes_states(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        it = make_input(rng, k=4)
        perm = np.array([2, 1, 0, 3])
        swapped = SequenceInput(it.seq, it.positions[perm], it.features[perm])
        h = forward(P, collate([it], 8), cfg).hidden[0]
        hs = forward(P, collate([swapped], 8), cfg).hidden[0]
        vis = it.seq.visual_slots
        np.testing.assert_allclose(hs[vis], h[vis][perm], atol=1e-12)
        np.testing.assert_allclose(hs[0], h[0], atol=1e-12)

    def test_zero_tables_give_zero_text_embedding(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        for k in ("tok_emb", "pos_emb", "type_emb"):
            P[k][:] = 0
        x, _, _ = embed(P, collate([make_input(rng)], 8), cfg)
        np.testing.assert_array_equal(x[0, 0], 0.0)

    def test_same_token_differs_only_by_position(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        seq = encode_sequence([9, 9], [], 1)
        batch = collate([SequenceInput(seq, np.array([[0.1, 0.1, 0.2, 0.2, 0.01]]), np.zeros((1, 8)))], 8)
        P["pos_emb"][:] = 0
        x, _, _ = embed(P, batch, cfg)
        np.testing.assert_array_equal(x[0, 1], x[0, 2])

    def test_deterministic_without_dropout(self, rng):
        cfg = cfg_small(dropout=0.1)
        P = init_params(cfg, rng)
        batch = collate([make_input(rng)], 8)
        assert np.array_equal(forward(P, batch, cfg).hidden, forward(P, batch, cfg).hidden)

    def test_out_of_range_token(self, rng):
        cfg = cfg_small(vocab_size=10)
        with pytest.raises(ValidationError, match="token id"):
            forward(init_params(cfg, rng), collate([make_input(rng, vocab=20)], 8), cfg)

    def test_feature_dim_mismatch(self, rng):
        cfg = cfg_small(feature_dim=6)
        with pytest.raises(ValidationError, match="feature_dim=6"):
            forward(init_params(cfg, rng), collate([make_input(rng)], 8), cfg)

    def test_nonfinite_names_layer(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        P["layer1.W2"][0, 0] = np.inf
        with pytest.raises(NumericError, match="layer 1"):
            forward(P, collate([make_input(rng)], 8), cfg)


class TestBackward:
    def test_zero_upstream(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        trace = forward(P, collate([make_input(rng)], 8), cfg)
        g = backward(P, trace, np.zeros_like(trace.hidden))
        assert all(not v.any() for v in g.values())

    def test_repeatable(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        trace = forward(P, collate([make_input(rng), make_input(rng, 2, 1, 3)], 8), cfg)
        d = rng.normal(size=trace.hidden.shape)
        g1, g2 = backward(P, trace, d), backward(P, trace, d)
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_shape_mismatch(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        trace = forward(P, collate([make_input(rng)], 8), cfg)
        with pytest.raises(ValidationError):
            backward(P, trace, np.zeros((1, 2, 3)))

    def test_directional_derivative(self, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        batch = collate([make_input(rng), make_input(rng, 2, 2, 3)], 8)
        trace = forward(P, batch, cfg)
        w = rng.normal(size=trace.hidden.shape) * batch.key_valid[..., None]
        g = backward(P, trace, w)
        direction = {k: rng.normal(size=v.shape) for k, v in P.items()}
        h = 1e-6

        def f(sign):
            Q = {k: v + sign * h * direction[k] for k, v in P.items()}
            return float((forward(Q, batch, cfg).hidden * w).sum())

        numeric = (f(1) - f(-1)) / (2 * h)
        analytic = sum(float((g[k] * direction[k]).sum()) for k in P)
        assert analytic == pytest.approx(numeric, rel=1e-6)


class TestHeads:
    def _trace(self, rng, cfg=None):
        cfg = cfg or cfg_small()
        P = randomized_params(cfg, rng)
        it = make_input(rng)
        return cfg, P, it, forward(P, collate([it], 8), cfg)

    def test_output_shapes(self, rng):
        cfg, P, it, tr = self._trace(rng)
        vis = (np.array([0, 0]), it.seq.visual_slots[:2])
        txt = (np.array([0]), np.array([1]))
        assert heads.mlm_forward(P, tr, txt)[0].shape == (1, 20)
        assert heads.mrc_forward(P, tr, vis)[0].shape == (2, 5)
        assert heads.mrfr_forward(P, tr, vis)[0].shape == (2, 8)
        assert heads.opr_forward(P, tr, vis)[0].shape == (2, 5)
        assert heads.src_forward(P, tr, [0], [vis[1][0]], [vis[1][1]])[0].shape == (1, 10)
        assert heads.matching_forward(P, tr)[0].shape == (1,)

    def test_zero_weights(self, rng):
        cfg, P, it, tr = self._trace(rng)
        for k in list(P):
            if k.startswith(("opr.", "src.", "mrc.", "match.")):
                P[k] = np.zeros_like(P[k])
        vis = (np.array([0]), it.seq.visual_slots[:1])
        assert not heads.opr_forward(P, tr, vis)[0].any()
        logits = heads.src_forward(P, tr, [0], [it.seq.visual_slots[0]], [it.seq.visual_slots[1]])[0]
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(p, 0.1)
        assert not heads.mrc_forward(P, tr, vis)[0].any()
        assert heads.matching_forward(P, tr)[0][0] == 0.0

    def test_modality_errors(self, rng):
        cfg, P, it, tr = self._trace(rng)
        txt = (np.array([0]), np.array([1]))
        vis = (np.array([0]), it.seq.visual_slots[:1])
        with pytest.raises(ValidationError, match="visual"):
            heads.opr_forward(P, tr, txt)
        with pytest.raises(ValidationError, match="visual"):
            heads.mrc_forward(P, tr, txt)
        with pytest.raises(ValidationError, match="text"):
            heads.mlm_forward(P, tr, vis)
        with pytest.raises(ValidationError, match="distinct"):
            heads.src_forward(P, tr, [0], [it.seq.visual_slots[0]], [it.seq.visual_slots[0]])

    def test_src_order_sensitive(self, rng):
        cfg, P, it, tr = self._trace(rng)
        a, b = it.seq.visual_slots[:2]
        ab = heads.src_forward(P, tr, [0], [a], [b])[0]
        ba = heads.src_forward(P, tr, [0], [b], [a])[0]
        assert not np.allclose(ab, ba)


class TestConfigAndCheckpoint:
    def test_config_validation(self):
        with pytest.raises(ValidationError, match="divisible"):
            cfg_small(hidden=10, heads=4)
        with pytest.raises(ValidationError):
            cfg_small(src_metric="angle")

    def test_head_width_follows_metric(self):
        assert param_shapes(cfg_small(src_metric="direction"))["src.W2"] == (16, 4)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        cfg = cfg_small()
        P = randomized_params(cfg, rng)
        save_checkpoint(tmp_path / "ck", cfg, P, {"task_set": "MLM+MRC"})
        cfg2, P2, meta = load_checkpoint(tmp_path / "ck")
        assert cfg2 == cfg and meta == {"task_set": "MLM+MRC"}
        assert all(P2[k].tobytes() == P[k].tobytes() for k in P)
        blob = (tmp_path / "ck" / "params.bin").read_bytes()
        assert len(blob) == 8 * sum(v.size for v in P.values())

    def test_manifest_lists_every_param(self, tmp_path, rng):
        cfg = cfg_small()
        save_checkpoint(tmp_path / "ck", cfg, init_params(cfg, rng))
        fields, entries = read_manifest(tmp_path / "ck")
        assert [n for n, _ in entries] == list(param_shapes(cfg))
        assert fields["dtype"] == "float64-le"

    def test_mismatch_names_parameter(self, tmp_path, rng):
        cfg = cfg_small()
        save_checkpoint(tmp_path / "ck", cfg, init_params(cfg, rng))
        with pytest.raises(ValidationError, match="tok_emb"):
            load_checkpoint(tmp_path / "ck", expect=cfg_small(vocab_size=21))

    def test_truncated_blob(self, tmp_path, rng):
        cfg = cfg_small()
        save_checkpoint(tmp_path / "ck", cfg, init_params(cfg, rng))
        blob = tmp_path / "ck" / "params.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ValidationError, match="truncated"):
            load_checkpoint(tmp_path / "ck")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nope")

    def test_check_params_extra(self, rng):
        cfg = cfg_small()
        P = init_params(cfg, rng)
        P["bogus"] = np.zeros(1)
        with pytest.raises(ValidationError, match="bogus"):
            check_params(cfg, P)
