"""Autodiff engine tests: forward values, gradients, tape semantics, RNG."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import solgraph.autodiff as ad
from solgraph.autodiff import (
    NotScalarLoss,
    ShapeMismatch,
    SplitRng,
    Tape,
    TapeConsumed,
    check_gradients,
)

RNG = np.random.default_rng(20240817)


def scalar(t):
    return float(t.values)


# ---------------------------------------------------------------------------
# Forward values
# ---------------------------------------------------------------------------

class TestForward:
    def test_matmul_identity(self):
        tape = Tape()
        a = tape.tensor(RNG.normal(size=(3, 5)))
        eye = tape.tensor(np.eye(3))
        out = ad.matmul(eye, a)
        assert np.allclose(out.values, a.values)

    def test_matmul_shape_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeMismatch):
            ad.matmul(tape.tensor(np.zeros((2, 3))), tape.tensor(np.zeros((2, 3))))

    def test_softmax_symmetric_row(self):
        tape = Tape()
        out = ad.softmax_rows(tape.tensor([[0.0, 0.0]]))
        assert np.allclose(out.values, [[0.5, 0.5]])

    def test_softmax_rows_sum_to_one_large_offsets(self):
        tape = Tape(dtype=np.float64)
        x = np.array([[1000.0, 1001.0, 999.0], [-1e8, -1e8 + 1, -1e8 + 2]])
        out = ad.softmax_rows(tape.tensor(x))
        assert np.all(np.isfinite(out.values))
        assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_masked_entries_exactly_zero(self):
        tape = Tape()
        x = tape.tensor(RNG.normal(size=(4, 6)))
        mask = np.zeros((4, 6), dtype=bool)
        mask[:, :3] = True
        out = ad.softmax_rows(x, mask=mask)
        assert np.all(out.values[:, 3:] == 0.0)
        assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_fully_masked_row_rejected(self):
        tape = Tape()
        x = tape.tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ValueError):
            ad.softmax_rows(x, mask=mask)

    def test_mse_hand_value(self):
        tape = Tape()
        out = ad.mse(tape.tensor([1.0, 2.0, 3.0]), tape.tensor([2.0, 2.0, 2.0]))
        assert scalar(out) == pytest.approx(2.0 / 3.0)

    def test_layer_norm_standardizes(self):
        tape = Tape(dtype=np.float64)
        x = tape.tensor(RNG.normal(size=(5, 16)) * 3 + 7)
        out = ad.layer_norm(x, tape.tensor(np.ones(16)), tape.tensor(np.zeros(16)))
        assert np.allclose(out.values.mean(axis=1), 0.0, atol=1e-9)
        assert np.allclose(out.values.var(axis=1), 1.0, atol=1e-4)

    def test_relu_sigmoid_tanh_exp(self):
        tape = Tape(dtype=np.float64)
        x = tape.tensor([-2.0, 0.0, 3.0])
        assert np.allclose(ad.relu(x).values, [0.0, 0.0, 3.0])
        assert np.allclose(ad.sigmoid(x).values, 1 / (1 + np.exp([2.0, 0.0, -3.0])))
        assert np.allclose(ad.tanh(x).values, np.tanh([-2.0, 0.0, 3.0]))
        assert np.allclose(ad.exp(x).values, np.exp([-2.0, 0.0, 3.0]))

    def test_sigmoid_extreme_inputs_finite(self):
        tape = Tape()
        out = ad.sigmoid(tape.tensor([-1e4, 1e4]))
        assert np.all(np.isfinite(out.values))
        assert out.values[0] == pytest.approx(0.0, abs=1e-6)
        assert out.values[1] == pytest.approx(1.0, abs=1e-6)

    def test_concat_and_slice(self):
        tape = Tape()
        a = tape.tensor(np.ones((2, 3)))
        b = tape.tensor(np.zeros((2, 2)))
        cat = ad.concat([a, b], axis=1)
        assert cat.shape == (2, 5)
        assert np.allclose(ad.slice_cols(cat, 3, 5).values, 0.0)

    def test_gather_rows(self):
        tape = Tape()
        x = tape.tensor(np.arange(12.0).reshape(4, 3))
        out = ad.gather_rows(x, np.array([2, 0, 2]))
        assert np.allclose(out.values, x.values[[2, 0, 2]])

    def test_segment_sum_and_mean(self):
        tape = Tape()
        x = tape.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        ids = np.array([0, 0, 1])
        assert np.allclose(
            ad.segment_sum(x, ids, 2).values, [[4.0, 6.0], [5.0, 6.0]]
        )
        assert np.allclose(
            ad.segment_mean(x, ids, 2).values, [[2.0, 3.0], [5.0, 6.0]]
        )

    def test_segment_mean_empty_segment_rejected(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.segment_mean(tape.tensor(np.ones((2, 2))), np.array([0, 0]), 2)

    def test_segment_mean_idempotent_on_constant_segments(self):
        tape = Tape(dtype=np.float64)
        ids = np.array([0, 0, 1, 1, 1])
        base = np.array([[1.5, -2.0], [7.0, 0.25]])
        x = tape.tensor(base[ids])
        mean1 = ad.segment_mean(x, ids, 2)
        broadcast = ad.gather_rows(mean1, ids)
        mean2 = ad.segment_mean(broadcast, ids, 2)
        assert np.allclose(mean1.values, mean2.values)
        assert np.allclose(mean1.values, base)

    def test_add_broadcast_bias_row(self):
        tape = Tape()
        x = tape.tensor(np.zeros((4, 3)))
        bias = tape.tensor([1.0, 2.0, 3.0])
        out = x + bias
        assert np.allclose(out.values, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_operator_sugar(self):
        tape = Tape(dtype=np.float64)
        x = tape.tensor([2.0, 3.0])
        y = tape.tensor([10.0, 20.0])
        assert np.allclose((x + y).values, [12.0, 23.0])
        assert np.allclose((y - x).values, [8.0, 17.0])
        assert np.allclose((x * y).values, [20.0, 60.0])
        assert np.allclose((-x).values, [-2.0, -3.0])
        assert np.allclose((2.0 * x).values, [4.0, 6.0])

    def test_default_dtype_float32(self):
        tape = Tape()
        assert tape.tensor([1.0]).values.dtype == np.float32
        assert Tape(dtype=np.float64).tensor([1.0]).values.dtype == np.float64


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gradient_all_ones(self):
        tape = Tape()
        x = tape.tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        tape.backward(ad.sum_all(x))
        assert np.allclose(x.grad, 1.0)

    def test_quadratic_gradient(self):
        tape = Tape()
        x = tape.tensor([3.0], requires_grad=True)
        tape.backward(ad.sum_all(x * x))
        assert np.allclose(x.grad, [6.0])

    def test_not_scalar_loss(self):
        tape = Tape()
        x = tape.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalarLoss):
            tape.backward(x * x)

    def test_tape_consumed_on_second_backward(self):
        tape = Tape()
        x = tape.tensor([1.0], requires_grad=True)
        loss = ad.sum_all(x * x)
        tape.backward(loss)
        with pytest.raises(TapeConsumed):
            tape.backward(loss)

    def test_tape_consumed_on_record_after_backward(self):
        tape = Tape()
        x = tape.tensor([1.0], requires_grad=True)
        tape.backward(ad.sum_all(x))
        with pytest.raises(TapeConsumed):
            ad.sum_all(x)

    def test_constant_gets_no_grad(self):
        tape = Tape()
        x = tape.tensor([1.0], requires_grad=True)
        c = tape.tensor([5.0])
        tape.backward(ad.sum_all(x * c))
        assert c.grad is None
        assert np.allclose(x.grad, [5.0])

    def test_cross_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ValueError):
            ad.add(t1.tensor([1.0]), t2.tensor([1.0]))

    def test_grad_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.tensor([2.0], requires_grad=True)
        y = ad.add(x * x, x * x)  # 2x^2, dy/dx = 4x = 8
        tape.backward(ad.sum_all(y))
        assert np.allclose(x.grad, [8.0])


# ---------------------------------------------------------------------------
# Finite-difference checks, one per differentiable op
# ---------------------------------------------------------------------------

TOL = 1e-4


class TestGradCheck:
    def test_matmul(self):
        err = check_gradients(
            lambda tape, a, b: ad.sum_all(ad.matmul(a, b)),
            [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))],
        )
        assert err < TOL

    def test_add_broadcast(self):
        err = check_gradients(
            lambda tape, a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b))),
            [RNG.normal(size=(3, 4)), RNG.normal(size=(4,))],
        )
        assert err < TOL

    def test_mul(self):
        err = check_gradients(
            lambda tape, a, b: ad.sum_all(ad.mul(a, b)),
            [RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))],
        )
        assert err < TOL

    def test_relu(self):
        # Keep inputs away from the kink at 0.
        x = RNG.normal(size=(4, 4))
        x[np.abs(x) < 0.1] = 0.5
        err = check_gradients(lambda tape, a: ad.sum_all(ad.relu(a)), [x])
        assert err < TOL

    def test_sigmoid_tanh_exp(self):
        x = RNG.normal(size=(3, 3))
        for op in (ad.sigmoid, ad.tanh, ad.exp):
            err = check_gradients(lambda tape, a: ad.sum_all(op(a)), [x])
            assert err < TOL

    def test_softmax_rows(self):
        x = RNG.normal(size=(3, 5))
        w = RNG.normal(size=(3, 5))

        def fn(tape, a):
            # Weighted sum makes the loss sensitive to each softmax output.
            return ad.sum_all(ad.mul(ad.softmax_rows(a), tape.tensor(w)))

        assert check_gradients(fn, [x]) < TOL

    def test_softmax_rows_masked(self):
        x = RNG.normal(size=(4, 6))
        w = RNG.normal(size=(4, 6))
        mask = RNG.uniform(size=(4, 6)) > 0.4
        mask[:, 0] = True

        def fn(tape, a):
            return ad.sum_all(ad.mul(ad.softmax_rows(a, mask=mask), tape.tensor(w)))

        assert check_gradients(fn, [x]) < TOL

    def test_layer_norm(self):
        weights = RNG.normal(size=(3, 6))

        def fn(tape, a, g, b):
            return ad.sum_all(ad.mul(ad.layer_norm(a, g, b), tape.tensor(weights)))

        err = check_gradients(
            fn, [RNG.normal(size=(3, 6)), RNG.normal(size=(6,)), RNG.normal(size=(6,))]
        )
        assert err < TOL

    def test_concat_slice_transpose_reshape(self):
        def fn(tape, a, b):
            cat = ad.concat([a, b], axis=1)
            t = ad.transpose(ad.slice_cols(cat, 1, 4))
            return ad.sum_all(ad.mul(ad.reshape(t, (2, 6)), ad.reshape(t, (2, 6))))

        err = check_gradients(fn, [RNG.normal(size=(4, 2)), RNG.normal(size=(4, 3))])
        assert err < TOL

    def test_gather_and_segments(self):
        ids = np.array([0, 0, 1, 2, 2])

        def fn(tape, a):
            g = ad.gather_rows(a, np.array([1, 3, 0, 4, 2]))
            s = ad.segment_mean(g, ids, 3)
            return ad.sum_all(ad.mul(s, s))

        assert check_gradients(fn, [RNG.normal(size=(5, 3))]) < TOL

    def test_segment_sum(self):
        ids = np.array([0, 1, 1, 0])

        def fn(tape, a):
            s = ad.segment_sum(a, ids, 2)
            return ad.mean_all(ad.mul(s, s))

        assert check_gradients(fn, [RNG.normal(size=(4, 3))]) < TOL

    def test_mse(self):
        err = check_gradients(
            lambda tape, a, b: ad.mse(a, b),
            [RNG.normal(size=(5,)), RNG.normal(size=(5,))],
        )
        assert err < TOL

    def test_dropout_training_mode(self):
        # With a fixed rng the kept-mask is a constant; gradients flow
        # through the scaled identity on kept entries.
        x = RNG.normal(size=(4, 4))

        def fn(tape, a):
            rng = SplitRng(7)
            return ad.sum_all(ad.dropout(a, 0.5, training=True, rng=rng))

        assert check_gradients(fn, [x]) < TOL

    def test_composite_expression(self):
        def fn(tape, a, b, c):
            h = ad.relu(ad.add(ad.matmul(a, b), c))
            s = ad.softmax_rows(h)
            return ad.mse(ad.reshape(s, (s.values.size,)),
                          tape.tensor(np.zeros(s.values.size)))

        x = np.abs(RNG.normal(size=(3, 4))) + 0.2
        w = np.abs(RNG.normal(size=(4, 5))) + 0.2
        b = RNG.normal(size=(5,))
        assert check_gradients(fn, [x, w, b]) < TOL

    @given(
        rows=st.integers(1, 4),
        cols=st.integers(1, 4),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=20, deadline=None)
    def test_property_random_chain(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(rows, cols))
        w = rng.normal(size=(cols, 3))

        def fn(tape, a, b):
            return ad.mean_all(ad.tanh(ad.matmul(a, b)))

        assert check_gradients(fn, [x, w]) < TOL


# ---------------------------------------------------------------------------
# Dropout and RNG behavior
# ---------------------------------------------------------------------------

class TestDropoutRng:
    def test_eval_mode_identity(self):
        tape = Tape()
        x = tape.tensor(RNG.normal(size=(5, 5)), requires_grad=True)
        out = ad.dropout(x, 0.5, training=False)
        assert out is x

    def test_training_deterministic_given_seed(self):
        def run():
            tape = Tape()
            x = tape.tensor(np.ones((8, 8)))
            return ad.dropout(x, 0.3, training=True, rng=SplitRng(123)).values.copy()

        assert np.array_equal(run(), run())

    def test_training_scales_kept_entries(self):
        tape = Tape()
        x = tape.tensor(np.ones((64, 64)))
        out = ad.dropout(x, 0.25, training=True, rng=SplitRng(5))
        kept = out.values[out.values != 0]
        assert np.allclose(kept, 1.0 / 0.75)

    def test_invalid_probability(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.dropout(tape.tensor([1.0]), 1.0, training=True, rng=SplitRng(0))

    def test_split_rng_streams_differ(self):
        root = SplitRng(99)
        a, b = root.split(), root.split()
        assert not np.allclose(a.uniform(10), b.uniform(10))

    def test_split_rng_replayable(self):
        a = SplitRng(42)
        first = a.uniform((3, 3))
        b = SplitRng(42)
        assert np.array_equal(first, b.uniform((3, 3)))

    def test_draw_count_recorded(self):
        r = SplitRng(1)
        r.uniform((4, 5))
        r.integers(0, 10, size=7)
        assert r.draws == 27

    def test_split_children_deterministic(self):
        kids1 = [c.uniform(4) for c in SplitRng(7).split_many(3)]
        kids2 = [c.uniform(4) for c in SplitRng(7).split_many(3)]
        for a, b in zip(kids1, kids2):
            assert np.array_equal(a, b)
