import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramid import autodiff as ad
from paramid.autodiff import (
    NumericError,
    ShapeError,
    Tape,
    adam_init,
    adam_step,
    finite_diff_check,
)


def leaf(tape, arr):
    return tape.leaf(np.asarray(arr, dtype=float))


class TestForward:
    def test_sigmoid_at_zero(self):
        t = Tape()
        assert ad.sigmoid(leaf(t, 0.0)).data == 0.5

    def test_softmax_uniform_on_equal_logits(self):
        t = Tape()
        out = ad.softmax_rows(leaf(t, np.zeros((2, 5))))
        assert np.allclose(out.data, 0.2)

    def test_matmul_identity(self):
        t = Tape()
        a = np.arange(12.0).reshape(3, 4)
        out = ad.matmul(leaf(t, np.eye(3)), leaf(t, a))
        assert np.array_equal(out.data, a)

    def test_masked_fill(self):
        t = Tape()
        x = leaf(t, [[1.0, 2.0], [3.0, 4.0]])
        out = ad.masked_fill(x, np.array([[1, 0], [0, 1]]), fill=-9.0)
        assert np.array_equal(out.data, [[1.0, -9.0], [-9.0, 4.0]])

    def test_shape_mismatch_rejected(self):
        t = Tape()
        with pytest.raises(ShapeError):
            ad.add(leaf(t, np.zeros(3)), leaf(t, np.zeros(4)))

    def test_non_finite_rejected(self):
        t = Tape()
        with pytest.raises(NumericError):
            ad.tlog(leaf(t, [-1.0]))

    def test_concat_slice_round_trip(self):
        t = Tape()
        a = leaf(t, np.arange(6.0).reshape(2, 3))
        b = leaf(t, np.arange(4.0).reshape(2, 2))
        joined = ad.concat([a, b], axis=-1)
        assert np.array_equal(ad.slice_axis(joined, -1, 3, 5).data, b.data)


class TestBackward:
    def test_square_gradient(self):
        t = Tape()
        w = leaf(t, 3.0)
        grads = t.backward(ad.square(w))
        assert grads[w] == pytest.approx(6.0)

    def test_sigmoid_gradient_at_zero(self):
        t = Tape()
        x = leaf(t, 0.0)
        grads = t.backward(ad.sigmoid(x))
        assert grads[x] == pytest.approx(0.25)

    def test_scalar_output_required(self):
        t = Tape()
        x = leaf(t, np.zeros(3))
        with pytest.raises(ShapeError):
            t.backward(x)

    def test_uninfluential_leaf_gets_zero(self):
        t = Tape()
        x = leaf(t, [1.0, 2.0])
        unused = leaf(t, np.ones(5))
        grads = t.backward(ad.tsum(ad.square(x)))
        assert np.array_equal(grads[unused], np.zeros(5))

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        sizes = [(4, 8), (8, 8), (8, 1)]
        point = {}
        for i, (a, b) in enumerate(sizes):
            point[f"w{i}"] = rng.standard_normal((a, b)) * 0.5
            point[f"b{i}"] = rng.standard_normal(b) * 0.1
        x_in = rng.standard_normal((5, 4))

        def fn(tape, ts):
            h = tape.constant(x_in)
            for i in range(3):
                h = ad.broadcast_add(ad.matmul(h, ts[f"w{i}"]), ts[f"b{i}"])
                if i < 2:
                    h = ad.tanh(h)
            return ad.tmean(ad.square(h))

        assert finite_diff_check(fn, point) < 1e-5

    def test_batched_matmul_gradients(self):
        rng = np.random.default_rng(1)
        point = {"a": rng.standard_normal((3, 2, 4)), "b": rng.standard_normal((3, 4, 2))}

        def fn(tape, ts):
            return ad.tsum(ad.square(ad.matmul(ts["a"], ts["b"])))

        assert finite_diff_check(fn, point) < 1e-6

    def test_shared_weight_batched_matmul(self):
        rng = np.random.default_rng(2)
        point = {"a": rng.standard_normal((3, 2, 4)), "w": rng.standard_normal((4, 5))}

        def fn(tape, ts):
            return ad.tmean(ad.square(ad.matmul(ts["a"], ts["w"])))

        assert finite_diff_check(fn, point) < 1e-6

    def test_softmax_masked_attention_block(self):
        rng = np.random.default_rng(3)
        mask = (rng.random((2, 3, 3)) > 0.3).astype(float)
        mask[:, :, 0] = 1.0  # keep at least one key per row
        point = {"q": rng.standard_normal((2, 3, 4)), "k": rng.standard_normal((2, 3, 4))}

        def fn(tape, ts):
            s = ad.matmul(ts["q"], ad.swap_last_axes(ts["k"]))
            p = ad.softmax_rows(ad.masked_fill(ad.scale(s, 0.5), mask))
            return ad.tsum(ad.square(p))

        assert finite_diff_check(fn, point) < 1e-5

    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    @settings(max_examples=25, deadline=None)
    def test_gradient_of_sum_is_sum_of_gradients(self, vals):
        t = Tape()
        x = leaf(t, vals)
        y1 = ad.tsum(ad.square(x))
        y2 = ad.tsum(ad.tanh(x))
        both = t.backward(ad.add(y1, y2))[x]

        t1 = Tape()
        x1 = leaf(t1, vals)
        g1 = t1.backward(ad.tsum(ad.square(x1)))[x1]
        t2 = Tape()
        x2 = leaf(t2, vals)
        g2 = t2.backward(ad.tsum(ad.tanh(x2)))[x2]
        assert np.allclose(both, g1 + g2)


class TestStraightThrough:
    def test_bernoulli_rate_at_zero_logit(self):
        t = Tape()
        rng = np.random.default_rng(0)
        out = ad.bernoulli_st(leaf(t, np.zeros(100_000)), rng)
        assert abs(out.data.mean() - 0.5) < 0.01

    def test_bernoulli_backward_is_sigmoid_derivative(self):
        t = Tape()
        logits = leaf(t, [0.0, 2.0])
        gate = ad.bernoulli_st(logits, np.random.default_rng(1))
        grads = t.backward(ad.tsum(gate))
        s = 1 / (1 + np.exp(-logits.data))
        assert np.allclose(grads[logits], s * (1 - s))

    def test_threshold_gate(self):
        t = Tape()
        out = ad.threshold_st(leaf(t, [-3.0, 3.0]))
        assert np.array_equal(out.data, [0.0, 1.0])

    def test_reproducible_with_seed(self):
        draws = []
        for _ in range(2):
            t = Tape()
            draws.append(ad.bernoulli_st(leaf(t, np.zeros(64)), np.random.default_rng(7)).data)
        assert np.array_equal(draws[0], draws[1])


class TestReplay:
    def test_replay_reproduces_outputs(self):
        t = Tape()
        rng = np.random.default_rng(5)
        x = leaf(t, rng.standard_normal((4, 4)))
        gate = ad.bernoulli_st(x, np.random.default_rng(0))
        out = ad.tsum(ad.mul(ad.softmax_rows(x), gate))
        before = out.data.copy()
        t.replay()
        assert np.array_equal(out.data, before)

    def test_replay_follows_leaf_updates(self):
        t = Tape()
        x = leaf(t, 2.0)
        y = ad.square(x)
        x.data = np.asarray(5.0)
        t.replay()
        assert y.data == 25.0


class TestFiniteDiffCheck:
    def test_linear_is_exact(self):
        def fn(tape, ts):
            return ad.tsum(ad.scale(ts["x"], 3.0))

        assert finite_diff_check(fn, {"x": np.array([1.0, -2.0])}) < 1e-10

    def test_quadratic_within_tolerance(self):
        def fn(tape, ts):
            return ad.tsum(ad.square(ts["x"]))

        assert finite_diff_check(fn, {"x": np.array([0.3, -1.2, 2.0])}) < 1e-7

    def test_kink_reported_not_masked(self):
        # |x| via exp(log(x^2)/2) has no stable derivative near 0
        def fn_kinky(tape, ts):
            y = ad.square(ts["x"])
            return ad.tsum(ad.texp(ad.scale(ad.tlog(y), 0.5)))

        err = finite_diff_check(fn_kinky, {"x": np.array([1e-7])}, h=1e-5)
        assert err > 1e-2


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.ones(3)}
        opt = adam_init(p, lr=0.1)
        adam_step(opt, p, {"w": np.zeros(3)})
        assert np.array_equal(p["w"], np.ones(3))

    def test_moves_against_gradient_sign(self):
        p = {"w": np.zeros(4)}
        opt = adam_init(p, lr=0.05)
        for _ in range(30):
            adam_step(opt, p, {"w": np.full(4, 2.0)})
        assert (p["w"] < 0).all()

    def test_step_counter(self):
        p = {"w": np.zeros(1)}
        opt = adam_init(p, lr=0.1)
        for expected in range(1, 4):
            adam_step(opt, p, {"w": np.ones(1)})
            assert opt.step == expected

    def test_shape_mismatch(self):
        p = {"w": np.zeros(2)}
        opt = adam_init(p, lr=0.1)
        with pytest.raises(ShapeError):
            adam_step(opt, p, {"w": np.zeros(3)})
