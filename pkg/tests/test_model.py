"""Tests for the two-tower encoder: hand oracles, masking, checkpoints."""

import numpy as np
import pytest

from tagtrim import model as M
from tagtrim.errors import DataError
from tagtrim.numerics import GradientTape, Tensor
from tagtrim.numerics import tensor as tz
from tagtrim.querydata import (
    QueryRecord,
    Vocab,
    build_vocab,
    default_synth_config,
    generate_synthetic,
)
from tagtrim.taggraph import TagGraph, mine_tag_pairs

SMALL = M.ModelConfig(
    d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=10, right_layers=1
)

RECORD = QueryRecord(
    source=["subaru", "sti", "2008", "turbo"],
    target=["subaru", "sti", "turbo"],
    tags=["brand", "model", "year", "feature"],
    labels=[2, 2, 3, 2],
)
SHORT = QueryRecord(
    source=["red", "dress"],
    target=["dress"],
    tags=["color", "type"],
    labels=[3, 2],
)
GRAPH = TagGraph(edges={("feature", "model"): 2}, min_support=1)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab([RECORD, SHORT])


@pytest.fixture(scope="module")
def params(vocab):
    return M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=11)


def reference_softmax_rows(a, w):
    """Independent weighted softmax: plain loops, no shared code."""
    out = np.zeros_like(a, dtype=np.float64)
    for i in range(a.shape[0]):
        valid = [k for k in range(a.shape[1]) if w[i, k] > 0]
        m = max(a[i, k] for k in valid)
        zs = {k: w[i, k] * np.exp(a[i, k] - m) for k in valid}
        denom = sum(zs.values())
        for k in valid:
            out[i, k] = zs[k] / denom
    return out


class TestConfig:
    def test_defaults(self):
        cfg = M.ModelConfig()
        assert (cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.d_ff) == (
            64, 4, 2, 256,
        )
        assert cfg.k == 3
        assert cfg.fusion == "gated"
        assert cfg.graph_mode == "static"
        assert cfg.tag_dim == cfg.d_model  # default: same width as towers

    def test_tag_dim_override(self):
        assert M.ModelConfig(tag_dim=12).tag_dim == 12

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"k": 2},
            {"d_model": 10, "n_heads": 4},
            {"fusion": "sum"},
            {"graph_mode": "full"},
            {"eps": 0.0},
            {"dropout": 1.0},
            {"dropout": -0.1},
            {"max_len": 2},
            {"n_layers": 0},
            {"right_heads": 3, "d_model": 64},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            M.ModelConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = M.ModelConfig(d_model=32, n_heads=4, fusion="mean")
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(ValueError, match="unknown model config keys"):
            M.ModelConfig.from_dict({"d_model": 8, "n_head": 2})


class TestParams:
    def test_shapes(self, vocab):
        shapes = M.param_shapes(SMALL, vocab.n_tokens, vocab.n_tags)
        assert shapes["token_emb"] == (vocab.n_tokens, 8)
        assert shapes["type_emb"] == (2, 8)
        assert shapes["pos_emb"] == (10, 8)
        assert shapes["left0.wq"] == (8, 8)
        assert shapes["left0.ffn_w_in"] == (8, 16)
        assert shapes["W1"] == (8, 8)
        assert shapes["W6"] == (8, 8)
        assert shapes["c"] == (8,)
        assert shapes["W9"] == (8, 8)
        assert shapes["head_W"] == (8, 3)
        assert shapes["gamma1"] == ()  # learned scalar by default
        assert "left1.wq" not in shapes

    def test_scalar_gate_and_per_dim_shapes(self, vocab):
        cfg = M.clone_config(SMALL, gate_scalar=True, per_dim_affine=True)
        shapes = M.param_shapes(cfg, vocab.n_tokens, vocab.n_tags)
        assert shapes["W6"] == (8, 1)
        assert shapes["c"] == (1,)
        assert shapes["gamma1"] == (8,)
        assert shapes["left0.beta_ffn"] == (8,)

    def test_extra_right_layers_get_suffixed_names(self, vocab):
        cfg = M.clone_config(SMALL, right_layers=2)
        shapes = M.param_shapes(cfg, vocab.n_tokens, vocab.n_tags)
        assert "W1" in shapes and "W1_l1" in shapes and "b_l1" in shapes

    def test_init_values(self, vocab):
        p = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=3)
        assert p["gamma1"].data == 1.0
        assert p["beta1"].data == 0.0
        assert np.all(p["left0.bq"].data == 0.0)
        assert np.all(p["c"].data == 0.0)
        assert np.all(p["head_b"].data == 0.0)
        big = M.init_params(
            M.ModelConfig(), vocab.n_tokens, vocab.n_tags, seed=3
        )
        std = big["left0.wq"].data.std()
        assert 0.015 < std < 0.025  # draws follow the 0.02-scale init

    def test_init_deterministic(self, vocab):
        a = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=5)
        b = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=5)
        c = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=6)
        assert np.array_equal(a["W1"].data, b["W1"].data)
        assert not np.array_equal(a["W1"].data, c["W1"].data)

    def test_snapshot_restore(self, vocab):
        p = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=5)
        snap = p.snapshot()
        p["W1"].data = p["W1"].data + 1.0
        assert not np.array_equal(p["W1"].data, snap["W1"])
        p.restore(snap)
        assert np.array_equal(p["W1"].data, snap["W1"])


class TestPrepareBatch:
    def test_single_record_wrapping(self, vocab):
        batch = M.prepare_batch([RECORD], vocab, SMALL, GRAPH)
        ids = [vocab.token_id(t) for t in
               ["[CLS]", "subaru", "sti", "2008", "turbo", "[SEP]"]]
        assert batch.token_ids.tolist() == [ids]
        assert batch.type_ids.tolist() == [[0, 1, 1, 1, 1, 0]]
        none_id = vocab.tag_id("[NONE]")
        tag_ids = [vocab.tag_id(t) for t in RECORD.tags]
        assert batch.tag_ids.tolist() == [[none_id, *tag_ids, none_id]]
        assert batch.labels.tolist() == [[1, 2, 2, 3, 2, 1]]
        assert batch.mask.tolist() == [[1.0] * 6]
        assert batch.positions.tolist() == [0, 1, 2, 3, 4, 5]
        assert batch.lengths.tolist() == [4]

    def test_padding_and_mask(self, vocab):
        batch = M.prepare_batch([RECORD, SHORT], vocab, SMALL, GRAPH)
        assert batch.token_ids.shape == (2, 6)
        pad = vocab.token_id("[PAD]")
        assert batch.token_ids[1].tolist()[4:] == [pad, pad]
        assert batch.labels[1].tolist() == [1, 3, 2, 1, 1, 1]
        assert batch.mask[1].tolist() == [1, 1, 1, 1, 0, 0]
        # PAD rows in the left-tower mask keep only the self edge
        w = batch.attn_weights[1]
        assert w[4].tolist() == [0, 0, 0, 0, 1, 0]
        assert w[5].tolist() == [0, 0, 0, 0, 0, 1]
        assert w[:4, :4].tolist() == np.ones((4, 4)).tolist()
        assert w[:4, 4:].tolist() == np.zeros((4, 2)).tolist()

    def test_adjacency_wrapping(self, vocab):
        batch = M.prepare_batch([RECORD], vocab, SMALL, GRAPH)
        adj = batch.adjacency[0]
        # interior: self + consecutive + the mined (feature, model) edge
        expect = np.eye(6)
        for i in range(5):
            expect[i, i + 1] = expect[i + 1, i] = 1
        expect[2, 4] = expect[4, 2] = 1  # sti (model) <-> turbo (feature)
        assert np.array_equal(adj, expect)

    def test_empty_graph_leaves_path_structure(self, vocab):
        empty = TagGraph(edges={}, min_support=1)
        batch = M.prepare_batch([RECORD], vocab, SMALL, empty)
        adj = batch.adjacency[0]
        band = np.eye(6)
        for i in range(5):
            band[i, i + 1] = band[i + 1, i] = 1
        assert np.array_equal(adj, band)

    def test_pad_rows_self_only_in_adjacency(self, vocab):
        batch = M.prepare_batch([RECORD, SHORT], vocab, SMALL, GRAPH)
        adj = batch.adjacency[1]
        assert adj[4].tolist() == [0, 0, 0, 0, 1, 0]
        assert adj[5].tolist() == [0, 0, 0, 0, 0, 1]

    def test_too_long_record_raises(self, vocab):
        cfg = M.clone_config(SMALL, max_len=5)
        with pytest.raises(DataError, match="exceeds max_len"):
            M.prepare_batch([RECORD], vocab, cfg, GRAPH)

    def test_static_mode_requires_graph(self, vocab):
        with pytest.raises(ValueError, match="requires a tag graph"):
            M.prepare_batch([RECORD], vocab, SMALL, None)

    def test_empty_batch_rejected(self, vocab):
        with pytest.raises(ValueError, match="at least one record"):
            M.prepare_batch([], vocab, SMALL, GRAPH)

    def test_unseen_tokens_map_to_unk(self, vocab):
        rec = QueryRecord(
            source=["zzz", "dress"], target=["dress"],
            tags=["mystery", "type"], labels=[3, 2],
        )
        batch = M.prepare_batch([rec], vocab, SMALL, GRAPH)
        assert batch.token_ids[0, 1] == vocab.token_id("[UNK]")
        assert batch.tag_ids[0, 1] == vocab.tag_id("[UNK]")


class TestEmbedInputs:
    def test_sum_of_three_tables(self):
        rng = np.random.default_rng(0)
        params = {
            "token_emb": Tensor(rng.normal(size=(5, 3))),
            "type_emb": Tensor(rng.normal(size=(2, 3))),
            "pos_emb": Tensor(rng.normal(size=(4, 3))),
        }
        token_ids = np.array([[1, 4, 0]])
        type_ids = np.array([[0, 1, 0]])
        positions = np.arange(3)
        v = M.embed_inputs(token_ids, type_ids, positions, params).data
        for j in range(3):
            expect = (
                params["token_emb"].data[token_ids[0, j]]
                + params["type_emb"].data[type_ids[0, j]]
                + params["pos_emb"].data[positions[j]]
            )
            assert np.allclose(v[0, j], expect, atol=1e-12)


class TestGraphMaskedAttention:
    def test_hand_oracle_three_tokens(self):
        # Path adjacency over three 2-d vectors, one head, worked through
        # with independent scalar arithmetic.
        v = np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
        w1 = np.array([[0.5, 0.0], [0.0, 1.0]])
        w2 = np.array([[1.0, 0.5], [0.0, 0.5]])
        w3 = np.array([[1.0, 0.0], [1.0, 1.0]])
        w4 = np.array([[1.0, 2.0], [0.0, 1.0]])
        adj = np.array([[[1.0, 1, 0], [1, 1, 1], [0, 1, 1]]])
        params = {
            "W1": Tensor(w1), "W2": Tensor(w2),
            "W3": Tensor(w3), "W4": Tensor(w4),
        }
        cfg = M.ModelConfig(d_model=2, n_heads=1, right_heads=1, n_layers=1,
                            d_ff=4, max_len=3)
        o, a, alpha = M.graph_masked_attention(
            Tensor(v), Tensor(adj), params, cfg
        )
        q, k, vals = v[0] @ w1, v[0] @ w2, v[0] @ w3
        a_ref = q @ k.T
        assert np.allclose(a.data[0, 0], a_ref, atol=1e-12)
        alpha_ref = reference_softmax_rows(a_ref, adj[0])
        assert np.allclose(alpha.data[0, 0], alpha_ref, atol=1e-12)
        o_ref = (alpha_ref @ vals) @ w4
        assert np.allclose(o.data[0], o_ref, atol=1e-12)

    def test_masked_positions_block_information_exactly(self):
        rng = np.random.default_rng(42)
        d = 8
        cfg = M.ModelConfig(d_model=d, n_heads=2, right_heads=2, n_layers=1,
                            d_ff=16, max_len=6)
        params = {
            name: Tensor(rng.normal(size=(d, d)))
            for name in ("W1", "W2", "W3", "W4")
        }
        adj = np.eye(6)
        adj[0, 1] = adj[1, 0] = 1.0
        adj[2, 3] = adj[3, 2] = 1.0
        v = rng.normal(size=(1, 6, d))
        o1, _, alpha1 = M.graph_masked_attention(
            Tensor(v), Tensor(adj[None]), params, cfg
        )
        assert np.all(alpha1.data[:, :, adj == 0.0] == 0.0)
        v2 = v.copy()
        v2[0, 5] += rng.normal(size=d) * 10  # position 5 is isolated
        o2, _, _ = M.graph_masked_attention(
            Tensor(v2), Tensor(adj[None]), params, cfg
        )
        # every other position's output is bitwise unchanged
        assert np.array_equal(o1.data[0, :5], o2.data[0, :5])
        assert not np.array_equal(o1.data[0, 5], o2.data[0, 5])

    def test_rows_sum_to_one(self, vocab, params):
        batch = M.prepare_batch([RECORD, SHORT], vocab, SMALL, GRAPH)
        out = M.forward_batch(batch, params, SMALL)
        sums = out["alpha"].data.sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) < 1e-6)


class TestRightTower:
    def test_zero_weights_pass_input_through(self, vocab, params):
        # With W1..W5 zeroed, attention output and FFN are zero, the two
        # residual norms add nothing, and e^t equals the input exactly.
        p = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=2)
        for name in ("W1", "W2", "W3", "W4", "W5"):
            p[name].data = np.zeros_like(p[name].data)
        rng = np.random.default_rng(1)
        v = rng.normal(size=(2, 5, 8))
        weights = np.broadcast_to(np.eye(5), (2, 5, 5)).copy()
        e_t, internals = M.right_tower_forward(
            Tensor(v), Tensor(weights), p, SMALL
        )
        assert np.array_equal(e_t.data, v)
        assert np.all(internals["o"].data == 0.0)

    def test_beta_shifts_output(self, vocab):
        p = M.init_params(SMALL, vocab.n_tokens, vocab.n_tags, seed=2)
        for name in ("W1", "W2", "W3", "W4", "W5"):
            p[name].data = np.zeros_like(p[name].data)
        p["beta1"].data = np.float64(0.25)
        p["beta2"].data = np.float64(-1.0)
        v = np.zeros((1, 3, 8))
        weights = np.eye(3)[None]
        e_t, _ = M.right_tower_forward(Tensor(v), Tensor(weights), p, SMALL)
        assert np.allclose(e_t.data, 0.25 - 1.0, atol=1e-12)

    def test_two_layers_differ_from_one(self, vocab):
        cfg2 = M.clone_config(SMALL, right_layers=2)
        p = M.init_params(cfg2, vocab.n_tokens, vocab.n_tags, seed=4)
        rng = np.random.default_rng(3)
        v = rng.normal(size=(1, 4, 8))
        weights = np.ones((1, 4, 4))
        two, _ = M.right_tower_forward(Tensor(v), Tensor(weights), p, cfg2)
        one, _ = M.right_tower_forward(Tensor(v), Tensor(weights), p, SMALL)
        assert not np.allclose(two.data, one.data)


class TestDynamicTagGraph:
    def test_zero_weights_give_uniform_rows(self):
        params = {
            "tag_emb": Tensor(np.random.default_rng(0).normal(size=(4, 3))),
            "tag_pos_emb": Tensor(np.zeros((5, 3))),
            "W7": Tensor(np.zeros((3, 3))),
            "W8": Tensor(np.zeros((3, 3))),
        }
        tag_ids = np.array([[1, 2, 3]])
        alpha_t, a_t = M.dynamic_tag_graph(tag_ids, np.arange(3), params)
        assert np.all(a_t.data == 0.0)
        assert np.allclose(alpha_t.data, 1.0 / 3.0, atol=1e-12)

    def test_hand_oracle_two_positions(self):
        emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        pos = np.array([[0.1, 0.0], [0.0, 0.2]])
        w7 = np.array([[1.0, 0.0], [0.5, 1.0]])  # key map
        w8 = np.array([[2.0, 0.0], [0.0, 1.0]])  # query map
        params = {
            "tag_emb": Tensor(emb), "tag_pos_emb": Tensor(pos),
            "W7": Tensor(w7), "W8": Tensor(w8),
        }
        tag_ids = np.array([[1, 2]])
        alpha_t, a_t = M.dynamic_tag_graph(tag_ids, np.arange(2), params)
        g = emb[[1, 2]] + pos
        a_ref = (g @ w8) @ (g @ w7).T
        assert np.allclose(a_t.data[0], a_ref, atol=1e-12)
        ones = np.ones_like(a_ref)
        assert np.allclose(
            alpha_t.data[0], reference_softmax_rows(a_ref, ones), atol=1e-12
        )

    def test_validity_weights_zero_out_pad_columns(self):
        rng = np.random.default_rng(5)
        params = {
            "tag_emb": Tensor(rng.normal(size=(6, 4))),
            "tag_pos_emb": Tensor(rng.normal(size=(4, 4))),
            "W7": Tensor(rng.normal(size=(4, 4))),
            "W8": Tensor(rng.normal(size=(4, 4))),
        }
        tag_ids = np.array([[1, 3, 0, 0]])
        valid = np.zeros((1, 4, 4))
        valid[0, :2, :2] = 1.0
        valid[0, 2, 2] = valid[0, 3, 3] = 1.0
        alpha_t, _ = M.dynamic_tag_graph(
            tag_ids, np.arange(4), params, Tensor(valid)
        )
        assert np.all(alpha_t.data[0, :2, 2:] == 0.0)
        assert np.allclose(alpha_t.data.sum(axis=-1), 1.0)

    def test_out_of_range_tag_id_raises(self):
        params = {
            "tag_emb": Tensor(np.zeros((3, 2))),
            "tag_pos_emb": Tensor(np.zeros((2, 2))),
            "W7": Tensor(np.zeros((2, 2))),
            "W8": Tensor(np.zeros((2, 2))),
        }
        with pytest.raises(ValueError, match="out of range"):
            M.dynamic_tag_graph(np.array([[1, 7]]), np.arange(2), params)


class TestFuse:
    def test_mean_example(self):
        e_b = Tensor(np.array([[[2.0, 0.0]]]))
        e_t = Tensor(np.array([[[0.0, 2.0]]]))
        cfg = M.ModelConfig(d_model=2, n_heads=1, fusion="mean", d_ff=4)
        e, e_s = M.fuse(e_b, e_t, {}, cfg)
        assert e.data.tolist() == [[[1.0, 1.0]]]
        assert e_s is None

    def test_min_max(self):
        e_b = Tensor(np.array([[[2.0, -1.0]]]))
        e_t = Tensor(np.array([[[0.0, 3.0]]]))
        cfg_min = M.ModelConfig(d_model=2, n_heads=1, fusion="min", d_ff=4)
        cfg_max = M.ModelConfig(d_model=2, n_heads=1, fusion="max", d_ff=4)
        assert M.fuse(e_b, e_t, {}, cfg_min)[0].data.tolist() == [[[0.0, -1.0]]]
        assert M.fuse(e_b, e_t, {}, cfg_max)[0].data.tolist() == [[[2.0, 3.0]]]

    def test_zero_gate_params_average_towers(self):
        rng = np.random.default_rng(7)
        e_b = Tensor(rng.normal(size=(2, 3, 4)))
        e_t = Tensor(rng.normal(size=(2, 3, 4)))
        params = {"W6": Tensor(np.zeros((4, 4))), "c": Tensor(np.zeros(4))}
        cfg = M.ModelConfig(d_model=4, n_heads=1, d_ff=4)
        e, e_s = M.fuse(e_b, e_t, params, cfg)
        assert np.all(e_s.data == 0.5)
        assert np.allclose(e.data, 0.5 * (e_b.data + e_t.data), atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(8)
        e_b = Tensor(rng.normal(size=(1, 4, 4)) * 5)
        e_t = Tensor(rng.normal(size=(1, 4, 4)))
        params = {
            "W6": Tensor(rng.normal(size=(4, 4))),
            "c": Tensor(rng.normal(size=4)),
        }
        cfg = M.ModelConfig(d_model=4, n_heads=1, d_ff=4)
        _, e_s = M.fuse(e_b, e_t, params, cfg)
        assert np.all(e_s.data > 0.0) and np.all(e_s.data < 1.0)

    def test_override_selects_towers(self):
        rng = np.random.default_rng(9)
        e_b = Tensor(rng.normal(size=(1, 3, 4)))
        e_t = Tensor(rng.normal(size=(1, 3, 4)))
        cfg = M.ModelConfig(d_model=4, n_heads=1, d_ff=4)
        left, _ = M.fuse(e_b, e_t, {}, cfg, gate_override=1.0)
        right, _ = M.fuse(e_b, e_t, {}, cfg, gate_override=0.0)
        assert np.max(np.abs(left.data - e_b.data)) < 1e-9
        assert np.max(np.abs(right.data - e_t.data)) < 1e-9

    def test_scalar_gate_shape(self):
        rng = np.random.default_rng(10)
        e_b = Tensor(rng.normal(size=(2, 3, 4)))
        e_t = Tensor(rng.normal(size=(2, 3, 4)))
        params = {
            "W6": Tensor(rng.normal(size=(4, 1))),
            "c": Tensor(np.zeros(1)),
        }
        cfg = M.ModelConfig(d_model=4, n_heads=1, d_ff=4, gate_scalar=True)
        e, e_s = M.fuse(e_b, e_t, params, cfg)
        assert e_s.data.shape == (2, 3, 1)
        assert e.data.shape == (2, 3, 4)

    def test_shape_mismatch_rejected(self):
        cfg = M.ModelConfig(d_model=4, n_heads=1, d_ff=4, fusion="mean")
        with pytest.raises(ValueError, match="differ in shape"):
            M.fuse(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3, 4))),
                   {}, cfg)


class TestClassify:
    def test_zero_head_gives_uniform(self):
        params = {
            "head_W": Tensor(np.zeros((4, 3))),
            "head_b": Tensor(np.zeros(3)),
        }
        p = M.classify(Tensor(np.random.default_rng(0).normal(size=(2, 5, 4))),
                       params)
        assert np.allclose(p.data, 1.0 / 3.0, atol=1e-12)

    def test_matches_reference_softmax(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(1, 4, 5))
        params = {
            "head_W": Tensor(rng.normal(size=(5, 3))),
            "head_b": Tensor(rng.normal(size=3)),
        }
        p = M.classify(Tensor(e), params).data
        logits = e @ params["head_W"].data + params["head_b"].data
        ref = reference_softmax_rows(logits[0], np.ones((4, 3)))
        assert np.allclose(p[0], ref, atol=1e-12)


class TestForwardTrace:
    def test_static_trace_fields(self, vocab, params):
        trace = M.forward(RECORD, params, SMALL, vocab, graph=GRAPH)
        n = RECORD.n_tokens + 2
        assert trace.v.shape == (n, 8)
        assert trace.a.shape == (1, n, n)
        assert trace.alpha.shape == (1, n, n)
        assert trace.e_b.shape == trace.e_t.shape == trace.e.shape == (n, 8)
        assert trace.e_s.shape == (n, 8)
        assert trace.p.shape == (n, 3)
        assert trace.a_t is None and trace.alpha_t is None
        assert np.all(np.abs(trace.p.sum(axis=1) - 1.0) < 1e-6)
        assert np.all((trace.e_s > 0) & (trace.e_s < 1))

    def test_alpha_zero_off_graph(self, vocab, params):
        trace = M.forward(RECORD, params, SMALL, vocab, graph=GRAPH)
        adj = M.prepare_batch([RECORD], vocab, SMALL, GRAPH).adjacency[0]
        assert np.all(trace.alpha[:, adj == 0.0] == 0.0)

    def test_dynamic_trace_fields(self, vocab, params):
        cfg = M.clone_config(SMALL, graph_mode="dynamic")
        trace = M.forward(RECORD, params, cfg, vocab)
        n = RECORD.n_tokens + 2
        assert trace.a_t.shape == (n, n)
        assert trace.alpha_t.shape == (n, n)
        assert np.all(np.abs(trace.alpha_t.sum(axis=1) - 1.0) < 1e-6)
        assert np.all(trace.alpha_t > 0.0)  # soft weights keep every edge

    def test_none_mode_is_left_tower_only(self, vocab, params):
        cfg = M.clone_config(SMALL, graph_mode="none")
        trace = M.forward(RECORD, params, cfg, vocab)
        assert trace.e_t is None and trace.e_s is None and trace.a is None
        assert np.array_equal(trace.e, trace.e_b)

    def test_gate_override_reduces_to_left_tower(self, vocab, params):
        trace = M.forward(
            RECORD, params, SMALL, vocab, graph=GRAPH, gate_override=1.0
        )
        left_only = M.clone_config(SMALL, graph_mode="none")
        plain = M.forward(RECORD, params, left_only, vocab)
        assert np.max(np.abs(trace.e - trace.e_b)) < 1e-9
        assert np.max(np.abs(trace.e - plain.e)) < 1e-9

    def test_forward_is_deterministic(self, vocab, params):
        a = M.forward(RECORD, params, SMALL, vocab, graph=GRAPH)
        b = M.forward(RECORD, params, SMALL, vocab, graph=GRAPH)
        assert np.array_equal(a.p, b.p)


class TestPermutationConsistency:
    def test_vocab_order_does_not_change_predictions(self, vocab, params):
        # Reorder every non-reserved token and tag, permute the embedding
        # rows to match, and the prediction must be unchanged.
        rng = np.random.default_rng(123)
        tokens = vocab.token_list()
        tags = vocab.tag_list()
        tok_tail = tokens[4:]
        tag_tail = tags[3:]
        tok_perm = list(rng.permutation(len(tok_tail)))
        tag_perm = list(rng.permutation(len(tag_tail)))
        vocab2 = Vocab.from_lists(
            tokens[:4] + [tok_tail[i] for i in tok_perm],
            tags[:3] + [tag_tail[i] for i in tag_perm],
        )
        params2 = M.ModelParams(
            {name: Tensor(t.data.copy(), requires_grad=True)
             for name, t in params.items()}
        )
        tok_rows = list(range(4)) + [4 + i for i in tok_perm]
        tag_rows = list(range(3)) + [3 + i for i in tag_perm]
        params2["token_emb"].data = params["token_emb"].data[tok_rows]
        params2["tag_emb"].data = params["tag_emb"].data[tag_rows]
        for cfg in (SMALL, M.clone_config(SMALL, graph_mode="dynamic")):
            graph = GRAPH if cfg.graph_mode == "static" else None
            p1 = M.forward(RECORD, params, cfg, vocab, graph=graph).p
            p2 = M.forward(RECORD, params2, cfg, vocab2, graph=graph).p
            assert np.array_equal(p1, p2)


class TestBatchingInvariance:
    @pytest.mark.parametrize("mode", ["static", "dynamic", "none"])
    def test_padding_does_not_leak(self, vocab, params, mode):
        cfg = M.clone_config(SMALL, graph_mode=mode)
        graph = GRAPH if mode == "static" else None
        batch = M.prepare_batch([RECORD, SHORT], vocab, cfg, graph)
        out = M.forward_batch(batch, params, cfg)
        solo_long = M.forward(RECORD, params, cfg, vocab, graph=graph)
        solo_short = M.forward(SHORT, params, cfg, vocab, graph=graph)
        assert np.allclose(out["p"].data[0], solo_long.p, atol=1e-12)
        assert np.allclose(
            out["p"].data[1, :4], solo_short.p, atol=1e-12
        )

    def test_batch_loss_is_mean_of_record_losses(self, vocab, params):
        batch = M.prepare_batch([RECORD, SHORT], vocab, SMALL, GRAPH)
        out = M.forward_batch(batch, params, SMALL)
        loss = M.batch_loss(out["p"], batch)
        lone = [
            M.trace_loss(
                M.forward(r, params, SMALL, vocab, graph=GRAPH),
                M.wrap_labels(r),
            )
            for r in (RECORD, SHORT)
        ]
        assert abs(float(loss.data) - np.mean(lone)) < 1e-12


class TestTraceLoss:
    def test_wrap_labels(self):
        assert M.wrap_labels(SHORT) == [1, 3, 2, 1]

    def test_value_matches_hand_computation(self, vocab, params):
        trace = M.forward(SHORT, params, SMALL, vocab, graph=GRAPH)
        labels = M.wrap_labels(SHORT)
        expect = -np.mean(
            [np.log(trace.p[i, lab - 1]) for i, lab in enumerate(labels)]
        )
        assert abs(M.trace_loss(trace, labels) - expect) < 1e-12

    def test_length_mismatch_raises(self, vocab, params):
        trace = M.forward(SHORT, params, SMALL, vocab, graph=GRAPH)
        with pytest.raises(ValueError, match="labels for"):
            M.trace_loss(trace, [1, 2])


class TestGradients:
    def test_full_model_gradcheck(self, vocab):
        # Finite differences through the complete dynamic-gated model on a
        # four-token query, eight-dimensional embeddings.
        cfg = M.ModelConfig(
            d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=8,
            graph_mode="dynamic", fusion="gated",
        )
        params = M.init_params(cfg, vocab.n_tokens, vocab.n_tags, seed=21)
        batch = M.prepare_batch([RECORD], vocab, cfg)
        names = [
            "token_emb", "pos_emb", "left0.wq", "left0.bo",
            "left0.gamma_attn", "left0.ffn_w_in", "W1", "W3", "W5", "b",
            "gamma1", "beta2", "W6", "c", "tag_emb", "W7", "W8",
            "head_W", "head_b",
        ]
        sources = [params[n] for n in names]

        def run():
            out = M.forward_batch(batch, params, cfg)
            return M.batch_loss(out["p"], batch)

        with GradientTape() as tape:
            loss = run()
        grads = tape.gradients(loss, sources)

        h = 1e-5
        for name, tensor, grad in zip(names, sources, grads):
            flat = tensor.data.reshape(-1)
            idxs = range(flat.size) if flat.size <= 8 else \
                np.random.default_rng(hash(name) % 2**32).choice(
                    flat.size, size=8, replace=False
                )
            for idx in idxs:
                orig = flat[idx]
                flat[idx] = orig + h
                up = float(run().data)
                flat[idx] = orig - h
                down = float(run().data)
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = grad.reshape(-1)[idx]
                diff = abs(an - fd)
                # differences under 1e-8 sit below what central
                # differences can resolve on an O(1) loss
                assert diff < 1e-8 or diff / max(abs(an), abs(fd)) < 1e-4, (
                    f"{name}[{idx}]: analytic {an} vs fd {fd}"
                )

    def test_unused_value_map_gets_zero_gradient(self, vocab):
        # W9 is part of the declared parameter set but its value path is
        # not consumed, so its gradient must be exactly zero.
        cfg = M.clone_config(SMALL, graph_mode="dynamic")
        params = M.init_params(cfg, vocab.n_tokens, vocab.n_tags, seed=1)
        batch = M.prepare_batch([RECORD], vocab, cfg)
        with GradientTape() as tape:
            out = M.forward_batch(batch, params, cfg)
            loss = M.batch_loss(out["p"], batch)
        (g,) = tape.gradients(loss, [params["W9"]])
        assert np.all(g == 0.0)

    def test_pad_embedding_gets_zero_gradient(self, vocab, params):
        batch = M.prepare_batch([RECORD, SHORT], vocab, SMALL, GRAPH)
        with GradientTape() as tape:
            out = M.forward_batch(batch, params, SMALL)
            loss = M.batch_loss(out["p"], batch)
        (g,) = tape.gradients(loss, [params["token_emb"]])
        assert np.all(g[vocab.token_id("[PAD]")] == 0.0)


class TestDropout:
    def test_training_rng_changes_output_inference_does_not(self, vocab):
        cfg = M.clone_config(SMALL, dropout=0.5)
        params = M.init_params(cfg, vocab.n_tokens, vocab.n_tags, seed=1)
        batch = M.prepare_batch([RECORD], vocab, cfg, GRAPH)
        a = M.forward_batch(batch, params, cfg,
                            train_rng=np.random.default_rng(0))
        b = M.forward_batch(batch, params, cfg,
                            train_rng=np.random.default_rng(1))
        assert not np.array_equal(a["p"].data, b["p"].data)
        c = M.forward_batch(batch, params, cfg)
        d = M.forward_batch(batch, params, cfg)
        assert np.array_equal(c["p"].data, d["p"].data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, vocab, params):
        path = tmp_path / "model.npz"
        M.save_checkpoint(path, params, SMALL, vocab, GRAPH)
        params2, cfg2, vocab2, graph2 = M.load_checkpoint(path)
        assert cfg2 == SMALL
        assert vocab2 == vocab
        assert graph2.edges == GRAPH.edges
        assert graph2.min_support == GRAPH.min_support
        for name, t in params.items():
            assert np.array_equal(params2[name].data, t.data)
        before = M.forward(RECORD, params, SMALL, vocab, graph=GRAPH).p
        after = M.forward(RECORD, params2, cfg2, vocab2, graph=graph2).p
        assert np.array_equal(before, after)

    def test_round_trip_without_graph(self, tmp_path, vocab):
        cfg = M.clone_config(SMALL, graph_mode="dynamic")
        params = M.init_params(cfg, vocab.n_tokens, vocab.n_tags, seed=9)
        path = tmp_path / "model.npz"
        M.save_checkpoint(path, params, cfg, vocab)
        _, cfg2, _, graph2 = M.load_checkpoint(path)
        assert cfg2 == cfg and graph2 is None

    def test_version_mismatch_names_version(self, tmp_path, vocab, params):
        import json

        path = tmp_path / "model.npz"
        M.save_checkpoint(path, params, SMALL, vocab, GRAPH)
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
        meta = json.loads(str(arrays["__meta__"][()]))
        meta["format_version"] = 99
        arrays["__meta__"] = json.dumps(meta)
        np.savez(path, **arrays)
        with pytest.raises(DataError, match="99"):
            M.load_checkpoint(path)

    def test_missing_parameter_rejected(self, tmp_path, vocab, params):
        path = tmp_path / "model.npz"
        M.save_checkpoint(path, params, SMALL, vocab, GRAPH)
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
        del arrays["W6"]
        np.savez(path, **arrays)
        with pytest.raises(DataError, match="missing parameter 'W6'"):
            M.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path, vocab, params):
        path = tmp_path / "model.npz"
        M.save_checkpoint(path, params, SMALL, vocab, GRAPH)
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
        arrays["head_W"] = np.zeros((2, 2))
        np.savez(path, **arrays)
        with pytest.raises(DataError, match="head_W"):
            M.load_checkpoint(path)

    def test_non_checkpoint_file_rejected(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, stuff=np.zeros(3))
        with pytest.raises(DataError, match="no meta entry"):
            M.load_checkpoint(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "garbage.npz"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(DataError):
            M.load_checkpoint(path)
