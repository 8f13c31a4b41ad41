"""Model architecture tests: shapes, debug-config identities, independence
oracles (batch vs single graph, permutation equivariance), LSTM reference
equations, determinism, and the checkpoint container."""

import numpy as np
import pytest
from scipy.special import expit

import solgraph.autodiff as ad
from solgraph.autodiff import SplitRng, Tape, check_gradients
from solgraph.featurize import MoleculeGraph, build_graph
from solgraph.model import (
    Batch,
    EmptyGraph,
    ModelConfig,
    ModelParams,
    attention,
    gcn_forward,
    load_checkpoint,
    lstm_forward,
    make_batch,
    normalized_adjacency,
    pool_and_head,
    save_checkpoint,
    transformer_block,
    transformer_encode,
    model_forward,
)
from solgraph.smiles import parse

RNG = np.random.default_rng(7)

SMALL = ModelConfig(hidden_dim=16, transformer_depth=2, heads=2, mlp_dim=24,
                    dropout=0.0, seed=3)


def graphs_for(*smiles):
    return [build_graph(parse(s)) for s in smiles]


def forward_eval(graphs, params, config, dtype=np.float64):
    tape = Tape(dtype=dtype)
    batch = make_batch(graphs)
    out = model_forward(batch, params.wrap(tape), config, tape, training=False)
    return out.values


class TestConfig:
    def test_defaults_match_published_setting(self):
        c = ModelConfig()
        assert (c.in_dim, c.hidden_dim, c.transformer_depth, c.heads,
                c.mlp_dim) == (92, 128, 6, 8, 256)
        assert c.dropout == pytest.approx(0.2519)
        assert c.lstm_hidden == 128
        assert c.head_dim == 16

    def test_heads_must_divide_hidden(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=92, heads=8)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            ModelConfig(dropout=1.0)
        with pytest.raises(ValueError):
            ModelConfig(dropout=-0.1)

    def test_positive_extents(self):
        with pytest.raises(ValueError):
            ModelConfig(transformer_depth=0)


class TestInitParams:
    def test_deterministic(self):
        a = ModelParams.init(SMALL)
        b = ModelParams.init(SMALL)
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k]), k

    def test_seed_changes_weights(self):
        a = ModelParams.init(SMALL)
        b = ModelParams.init(ModelConfig(hidden_dim=16, transformer_depth=2,
                                         heads=2, mlp_dim=24, dropout=0.0, seed=4))
        assert not np.array_equal(a.arrays["gcn_weight"], b.arrays["gcn_weight"])

    def test_default_gcn_shape(self):
        p = ModelParams.init(ModelConfig())
        assert p.arrays["gcn_weight"].shape == (92, 128)

    def test_forget_gate_bias_ones(self):
        p = ModelParams.init(SMALL)
        L = SMALL.lstm_hidden
        bias = p.arrays["lstm_bias"]
        assert np.all(bias[L : 2 * L] == 1.0)
        assert np.all(bias[:L] == 0.0)
        assert np.all(bias[2 * L :] == 0.0)

    def test_layer_norm_init(self):
        p = ModelParams.init(SMALL)
        assert np.all(p.arrays["t00_ln1_gain"] == 1.0)
        assert np.all(p.arrays["t00_ln1_bias"] == 0.0)

    def test_glorot_bounds(self):
        p = ModelParams.init(SMALL)
        w = p.arrays["gcn_weight"]
        bound = np.sqrt(6.0 / (92 + 16))
        assert np.all(np.abs(w) <= bound)
        assert w.std() > 0.1 * bound

    def test_all_finite(self):
        p = ModelParams.init(SMALL)
        for k, v in p.arrays.items():
            assert np.all(np.isfinite(v)), k


class TestBatch:
    def test_layout(self):
        batch = make_batch(graphs_for("CCO", "C", "c1ccccc1"))
        assert batch.num_graphs == 3
        assert list(batch.counts) == [3, 1, 6]
        assert list(batch.offsets) == [0, 3, 4]
        assert batch.num_nodes == 10
        assert list(batch.graph_id) == [0, 0, 0, 1, 2, 2, 2, 2, 2, 2]

    def test_edge_offsets(self):
        batch = make_batch(graphs_for("CC", "CC"))
        # Second molecule's bond must reference nodes 2 and 3.
        assert set(map(tuple, batch.edge_index.T)) == {(0, 1), (1, 0), (2, 3), (3, 2)}

    def test_labels_collected(self):
        gs = graphs_for("C", "CC")
        for i, g in enumerate(gs):
            g.label = float(i)
        batch = make_batch(gs)
        assert np.allclose(batch.labels, [0.0, 1.0])

    def test_labels_none_when_missing(self):
        gs = graphs_for("C", "CC")
        gs[0].label = 1.0
        assert make_batch(gs).labels is None

    def test_empty_rejected(self):
        with pytest.raises(EmptyGraph):
            make_batch([])
        empty = MoleculeGraph(
            node_features=np.zeros((0, 92), dtype=np.float32),
            edge_index=np.zeros((2, 0), dtype=np.int64),
            edge_features=np.zeros((0, 10), dtype=np.float32),
        )
        with pytest.raises(EmptyGraph):
            make_batch([empty])

    def test_same_graph_mask(self):
        batch = make_batch(graphs_for("CC", "C"))
        expected = np.array([
            [True, True, False],
            [True, True, False],
            [False, False, True],
        ])
        assert np.array_equal(batch.same_graph_mask, expected)


class TestAdjacency:
    def test_single_atom_identity(self):
        a = normalized_adjacency(make_batch(graphs_for("C")))
        assert np.allclose(a, [[1.0]])

    def test_path_graph_values(self):
        # CCO: path 0-1-2.  With self-loops, degrees are (2, 3, 2).
        a = normalized_adjacency(make_batch(graphs_for("CCO")))
        assert a[0, 0] == pytest.approx(1 / 2)
        assert a[1, 1] == pytest.approx(1 / 3)
        assert a[0, 1] == pytest.approx(1 / np.sqrt(6))
        assert a[0, 2] == 0.0
        assert np.allclose(a, a.T)

    def test_block_diagonal(self):
        a = normalized_adjacency(make_batch(graphs_for("CC", "CC")))
        assert np.all(a[:2, 2:] == 0.0)
        assert np.all(a[2:, :2] == 0.0)


class TestGcn:
    def test_identity_weight_single_atom(self):
        # Debug config with hidden = 92 supports W = I: output is ReLU(x + b).
        config = ModelConfig(hidden_dim=92, heads=4, transformer_depth=1,
                             mlp_dim=8, dropout=0.0, seed=0)
        params = ModelParams.init(config)
        params.arrays["gcn_weight"] = np.eye(92, dtype=np.float32)
        params.arrays["gcn_bias"] = np.full(92, 0.25, dtype=np.float32)
        batch = make_batch(graphs_for("C"))
        tape = Tape(dtype=np.float64)
        out = gcn_forward(batch, params.wrap(tape), tape)
        expected = np.maximum(batch.node_features[0] + 0.25, 0.0)
        assert np.allclose(out.values[0], expected)

    def test_benzene_rows_identical(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("c1ccccc1"))
        tape = Tape(dtype=np.float64)
        out = gcn_forward(batch, params.wrap(tape), tape).values
        assert np.allclose(out, out[0], atol=1e-12)

    def test_permutation_equivariance(self):
        params = ModelParams.init(SMALL)
        g = build_graph(parse("CC(=O)Oc1ccccc1C(=O)O"))
        n = g.num_atoms
        sigma = np.random.default_rng(11).permutation(n)
        permuted = MoleculeGraph(
            node_features=np.empty_like(g.node_features),
            edge_index=sigma[g.edge_index],
            edge_features=g.edge_features.copy(),
        )
        permuted.node_features[sigma] = g.node_features

        tape1 = Tape(dtype=np.float64)
        out1 = gcn_forward(make_batch([g]), params.wrap(tape1), tape1).values
        tape2 = Tape(dtype=np.float64)
        out2 = gcn_forward(make_batch([permuted]), params.wrap(tape2), tape2).values
        assert np.max(np.abs(out2[sigma] - out1)) <= 1e-6


class TestAttention:
    def test_single_position_returns_value_row(self):
        tape = Tape(dtype=np.float64)
        v_row = RNG.normal(size=(1, 4))
        out = attention(tape.tensor(RNG.normal(size=(1, 4))),
                        tape.tensor(RNG.normal(size=(1, 4))),
                        tape.tensor(v_row))
        assert np.allclose(out.values, v_row)

    def test_zero_query_gives_per_graph_mean(self):
        tape = Tape(dtype=np.float64)
        batch = make_batch(graphs_for("CCO", "CC"))
        v = RNG.normal(size=(5, 4))
        out = attention(tape.tensor(np.zeros((5, 4))),
                        tape.tensor(RNG.normal(size=(5, 4))),
                        tape.tensor(v), mask=batch.same_graph_mask)
        assert np.allclose(out.values[0], v[:3].mean(axis=0))
        assert np.allclose(out.values[3], v[3:].mean(axis=0))

    def test_masking_matches_separate_computation(self):
        # Two-graph batch: masked batch attention must equal per-graph
        # attention computed on separate matrices.
        batch = make_batch(graphs_for("CCO", "c1ccccc1"))
        n = batch.num_nodes
        q, k, v = (RNG.normal(size=(n, 6)) for _ in range(3))

        tape = Tape(dtype=np.float64)
        joint = attention(tape.tensor(q), tape.tensor(k), tape.tensor(v),
                          mask=batch.same_graph_mask).values

        for lo, hi in ((0, 3), (3, 9)):
            tape_g = Tape(dtype=np.float64)
            solo = attention(tape_g.tensor(q[lo:hi]), tape_g.tensor(k[lo:hi]),
                             tape_g.tensor(v[lo:hi])).values
            assert np.max(np.abs(joint[lo:hi] - solo)) <= 1e-12

    def test_off_graph_weights_exactly_zero(self):
        batch = make_batch(graphs_for("CC", "CC"))
        tape = Tape()
        scores = ad.matmul(tape.tensor(RNG.normal(size=(4, 3)).astype(np.float32)),
                           tape.tensor(RNG.normal(size=(3, 4)).astype(np.float32)))
        weights = ad.softmax_rows(scores, mask=batch.same_graph_mask)
        assert np.all(weights.values[:2, 2:] == 0.0)
        assert np.all(weights.values[2:, :2] == 0.0)

    def test_rows_sum_to_one(self):
        batch = make_batch(graphs_for("CCO", "C", "CC"))
        tape = Tape(dtype=np.float64)
        n = batch.num_nodes
        w = ad.softmax_rows(tape.tensor(RNG.normal(size=(n, n))),
                            mask=batch.same_graph_mask)
        assert np.allclose(w.values.sum(axis=1), 1.0, atol=1e-6)


class TestTransformer:
    def test_zero_weights_identity(self):
        params = ModelParams.init(SMALL)
        for k in list(params.arrays):
            if k.startswith("t00_") and not k.endswith(("gain", "bias")):
                params.arrays[k] = np.zeros_like(params.arrays[k])
        batch = make_batch(graphs_for("CCO"))
        x = RNG.normal(size=(3, 16))
        tape = Tape(dtype=np.float64)
        out = transformer_block(tape.tensor(x), params.wrap(tape), 0, SMALL.heads,
                                batch.same_graph_mask, 0.0, False, None)
        assert np.allclose(out.values, x, atol=1e-12)

    def test_shape_preserved(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("c1ccccc1", "CC"))
        x = RNG.normal(size=(8, 16))
        tape = Tape(dtype=np.float64)
        out = transformer_encode(tape.tensor(x), params.wrap(tape), SMALL,
                                 batch.same_graph_mask, False, None)
        assert out.shape == (8, 16)

    def test_depth_changes_output(self):
        deeper = ModelConfig(hidden_dim=16, transformer_depth=3, heads=2,
                             mlp_dim=24, dropout=0.0, seed=3)
        params = ModelParams.init(deeper)
        batch = make_batch(graphs_for("CCO"))
        x = RNG.normal(size=(3, 16))

        def encode(config):
            tape = Tape(dtype=np.float64)
            return transformer_encode(tape.tensor(x), params.wrap(tape), config,
                                      batch.same_graph_mask, False, None).values

        shallow_cfg = ModelConfig(hidden_dim=16, transformer_depth=2, heads=2,
                                  mlp_dim=24, dropout=0.0, seed=3)
        assert not np.allclose(encode(deeper), encode(shallow_cfg))


class TestLstm:
    @staticmethod
    def reference(x_seq, wx, wh, bias):
        """Straight-line gate equations, independent of the autodiff engine."""
        L = wh.shape[0]
        h = np.zeros(L)
        c = np.zeros(L)
        outs = []
        for x in x_seq:
            z = x @ wx + h @ wh + bias
            i = expit(z[:L])
            f = expit(z[L : 2 * L])
            g = np.tanh(z[2 * L : 3 * L])
            o = expit(z[3 * L : 4 * L])
            c = f * c + i * g
            h = o * np.tanh(c)
            outs.append(h.copy())
        return np.array(outs)

    def test_zero_weights_zero_output(self):
        params = ModelParams.init(SMALL)
        for k in ("lstm_wx", "lstm_wh", "lstm_bias"):
            params.arrays[k] = np.zeros_like(params.arrays[k])
        batch = make_batch(graphs_for("CCO"))
        x = RNG.normal(size=(3, 16))
        tape = Tape(dtype=np.float64)
        out = lstm_forward(tape.tensor(x), batch, params.wrap(tape), tape)
        assert np.allclose(out.values, 0.0)

    def test_matches_reference_equations(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("CCCC"))
        x = RNG.normal(size=(4, 16))
        tape = Tape(dtype=np.float64)
        out = lstm_forward(tape.tensor(x), batch, params.wrap(tape), tape)
        expected = self.reference(
            x,
            params.arrays["lstm_wx"].astype(np.float64),
            params.arrays["lstm_wh"].astype(np.float64),
            params.arrays["lstm_bias"].astype(np.float64),
        )
        assert np.max(np.abs(out.values - expected)) <= 1e-10

    def test_single_step_matches_reference(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("C"))
        x = RNG.normal(size=(1, 16))
        tape = Tape(dtype=np.float64)
        out = lstm_forward(tape.tensor(x), batch, params.wrap(tape), tape)
        expected = self.reference(
            x,
            params.arrays["lstm_wx"].astype(np.float64),
            params.arrays["lstm_wh"].astype(np.float64),
            params.arrays["lstm_bias"].astype(np.float64),
        )
        assert np.max(np.abs(out.values - expected)) <= 1e-10

    def test_batch_equals_single_runs(self):
        params = ModelParams.init(SMALL)
        gs = graphs_for("CCO", "c1ccccc1")
        batch = make_batch(gs)
        x = RNG.normal(size=(batch.num_nodes, 16))

        tape = Tape(dtype=np.float64)
        joint = lstm_forward(tape.tensor(x), batch, params.wrap(tape), tape).values

        for lo, hi, g in ((0, 3, gs[0]), (3, 9, gs[1])):
            tape_g = Tape(dtype=np.float64)
            solo = lstm_forward(tape_g.tensor(x[lo:hi]), make_batch([g]),
                                params.wrap(tape_g), tape_g).values
            assert np.max(np.abs(joint[lo:hi] - solo)) <= 1e-6


class TestPoolAndHead:
    def test_single_atom_pooling_identity(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("C"))
        x = RNG.normal(size=(1, 16))
        tape = Tape(dtype=np.float64)
        out = pool_and_head(tape.tensor(x), batch, params.wrap(tape))
        w1, b1 = params.arrays["head_w1"], params.arrays["head_b1"]
        w2, b2 = params.arrays["head_w2"], params.arrays["head_b2"]
        expected = np.maximum(x @ w1 + b1, 0) @ w2 + b2
        assert np.allclose(out.values, expected.ravel())

    def test_constant_states_pool_exactly(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("CCO"))
        row = RNG.normal(size=16)
        x = np.tile(row, (3, 1))
        tape = Tape(dtype=np.float64)
        pooled = ad.segment_mean(tape.tensor(x), batch.graph_id, 1)
        assert np.allclose(pooled.values[0], row)
        out = pool_and_head(tape.tensor(x), batch, params.wrap(tape))
        assert out.shape == (1,)

    def test_two_graphs_two_outputs(self):
        params = ModelParams.init(SMALL)
        batch = make_batch(graphs_for("CC", "CCO"))
        x = RNG.normal(size=(5, 16))
        tape = Tape(dtype=np.float64)
        out = pool_and_head(tape.tensor(x), batch, params.wrap(tape))
        assert out.shape == (2,)


class TestFullModel:
    def test_eval_deterministic_bitwise(self):
        params = ModelParams.init(SMALL)
        gs = graphs_for("CC(=O)O", "c1ccccc1")
        a = forward_eval(gs, params, SMALL, dtype=np.float32)
        b = forward_eval(gs, params, SMALL, dtype=np.float32)
        assert np.array_equal(a, b)

    def test_train_mode_seeded_reproducible(self):
        config = ModelConfig(hidden_dim=16, transformer_depth=2, heads=2,
                             mlp_dim=24, dropout=0.3, seed=3)
        params = ModelParams.init(config)
        batch = make_batch(graphs_for("CC(=O)O", "c1ccccc1"))

        def run():
            tape = Tape()
            out = model_forward(batch, params.wrap(tape), config, tape,
                              training=True, rng=SplitRng(99))
            return out.values.copy()

        assert np.array_equal(run(), run())

    def test_batch_equals_single_graph_predictions(self):
        params = ModelParams.init(SMALL)
        smiles = ["CCO", "c1ccccc1", "CC(=O)Oc1ccccc1C(=O)O"]
        gs = graphs_for(*smiles)
        joint = forward_eval(gs, params, SMALL)
        for g, expected in zip(gs, joint):
            solo = forward_eval([g], params, SMALL)
            assert abs(solo[0] - expected) <= 1e-6

    def test_predictions_finite_on_varied_molecules(self):
        params = ModelParams.init(SMALL)
        smiles = ["C", "CCO", "c1cc[nH]c1", "C/C=C/C", "[NH4+]",
                  "CN1C=NC2=C1C(=O)N(C)C(=O)N2C", "FS(F)(F)(F)(F)F"]
        out = forward_eval(graphs_for(*smiles), params, SMALL, dtype=np.float32)
        assert out.shape == (len(smiles),)
        assert np.all(np.isfinite(out))

    def test_gradients_match_finite_differences(self):
        # Representative parameters from every stage; the full-parameter
        # sweep runs in the acceptance suite.
        config = ModelConfig(hidden_dim=8, transformer_depth=1, heads=2,
                             mlp_dim=8, dropout=0.0, seed=1)
        params = ModelParams.init(config)
        batch = make_batch(graphs_for("CCO"))
        target = np.array([-0.5])
        checked = ["gcn_weight", "t00_wq", "t00_ln1_gain", "t00_ff1",
                   "lstm_wx", "lstm_bias", "head_w2"]

        def fn(tape, *tensors):
            wrapped = {k: tape.tensor(v) for k, v in params.arrays.items()}
            wrapped.update(dict(zip(checked, tensors)))
            pred = model_forward(batch, wrapped, config, tape, training=False)
            return ad.mse(pred, tape.tensor(target))

        err = check_gradients(fn, [params.arrays[k].astype(np.float64)
                                   for k in checked])
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        params = ModelParams.init(SMALL)
        save_checkpoint(path, params, extra={"scaler_mean": "-2.5",
                                             "scaler_std": "1.75"})
        loaded, extra = load_checkpoint(path)
        assert loaded.config == SMALL
        assert extra == {"scaler_mean": "-2.5", "scaler_std": "1.75"}
        assert set(loaded.arrays) == set(params.arrays)
        for k in params.arrays:
            assert np.array_equal(
                params.arrays[k].view(np.uint32), loaded.arrays[k].view(np.uint32)
            ), k

    def test_magic_line(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, ModelParams.init(SMALL))
        with open(path, "rb") as fh:
            assert fh.readline() == b"SOLGRAPH-CKPT v1\n"

    def test_corruption_detected(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, ModelParams.init(SMALL))
        blob = bytearray(open(path, "rb").read())
        # Flip one bit inside the float payload region.
        blob[len(blob) // 2] ^= 0x10
        bad = str(tmp_path / "bad.ckpt")
        open(bad, "wb").write(bytes(blob))
        with pytest.raises(ValueError):
            load_checkpoint(bad)

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        open(path, "wb").write(b"garbage")
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, ModelParams.init(SMALL))
        blob = open(path, "rb").read()
        trunc = str(tmp_path / "t.ckpt")
        open(trunc, "wb").write(blob[:-20])
        with pytest.raises(ValueError):
            load_checkpoint(trunc)

    def test_config_document_sorted(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, ModelParams.init(SMALL), extra={"zzz": "1", "aaa": "2"})
        blob = open(path, "rb").read()
        doc_len = int.from_bytes(blob[17:21], "little")
        doc = blob[21 : 21 + doc_len].decode()
        keys = [line.split("=")[0] for line in doc.splitlines()]
        assert keys == sorted(keys)

    def test_loaded_params_produce_identical_predictions(self, tmp_path):
        path = str(tmp_path / "m.ckpt")
        params = ModelParams.init(SMALL)
        save_checkpoint(path, params)
        loaded, _ = load_checkpoint(path)
        gs = graphs_for("CCO", "c1ccccc1")
        a = forward_eval(gs, params, SMALL, dtype=np.float32)
        b = forward_eval(gs, loaded, loaded.config, dtype=np.float32)
        assert np.array_equal(a, b)
