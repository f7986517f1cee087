import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramid import autodiff as ad
from paramid.autodiff import Tape, finite_diff_check
from paramid.envs import make_spec, rollout, initial_condition
from paramid.models import (
    DecoderConfig,
    ModelError,
    default_encoder_config,
    decode_step,
    encode,
    init_model,
    load_checkpoint,
    masked_attention,
    path_counts,
    pool_trajectories,
    reparameterize,
    save_checkpoint,
    vcd_gates,
    wrap_leaves,
)

SPEC = make_spec("dual-particle", horizon=6)


def small_model(kind, token_mode="per-dim", spec=SPEC, seed=0):
    dec = DecoderConfig(kind=kind, token_mode=token_mode, layers=2, width=8, key_dim=4,
                        ffn_width=12, hidden=(16,))
    enc = default_encoder_config(spec, hidden=(24,))
    return init_model(spec, dec, np.random.default_rng(seed), encoder=enc)


def batch_trajs(spec, count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        params, x0 = initial_condition(spec, rng)
        out.append(rollout(spec, x0, params))
    return np.stack(out)


class TestEncoder:
    def test_output_shapes(self):
        model = small_model("mlp")
        tape = Tape()
        mean, logvar = encode(tape, wrap_leaves(tape, model), model, batch_trajs(SPEC, 3))
        assert mean.shape == (3, 3) and logvar.shape == (3, 3)

    def test_identical_inputs_identical_outputs(self):
        model = small_model("mlp")
        trajs = batch_trajs(SPEC, 1)
        doubled = np.concatenate([trajs, trajs])
        tape = Tape()
        mean, _ = encode(tape, wrap_leaves(tape, model), model, doubled)
        assert np.array_equal(mean.data[0], mean.data[1])

    def test_mean_gradient_matches_fd(self):
        model = small_model("mlp")
        trajs = batch_trajs(SPEC, 2)
        names = [n for n in model.params if n.startswith("enc_")]
        point = {n: model.params[n] for n in names}

        def fn(tape, ts):
            leaves = dict(ts)
            mean, _ = encode(tape, leaves, model, trajs)
            return ad.tmean(ad.square(mean))

        assert finite_diff_check(fn, point, h=1e-5) < 1e-4

    def test_pooling_shapes(self):
        spec = make_spec("bounce", horizon=9)
        cfg = default_encoder_config(spec, pool_window=4)
        flat = pool_trajectories(cfg, np.zeros((2, 10, 20)))
        assert flat.shape == (2, cfg.input_dim) and cfg.input_dim == 3 * 20


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        tape = Tape()
        mean = tape.leaf([[0.3, -1.2]])
        logvar = tape.leaf([[0.5, 0.1]])
        out = reparameterize(mean, logvar, np.zeros((1, 2)))
        assert np.array_equal(out.data, mean.data)

    def test_unit_logvar_zero(self):
        tape = Tape()
        out = reparameterize(tape.leaf([[1.0, 2.0]]), tape.leaf([[0.0, 0.0]]), np.ones((1, 2)))
        assert np.allclose(out.data, [[2.0, 3.0]])

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(0)
        tape = Tape()
        n = 100_000
        logvar_val = 0.7
        mean = tape.leaf(np.zeros((n, 1)))
        logvar = tape.leaf(np.full((n, 1), logvar_val))
        out = reparameterize(mean, logvar, rng.standard_normal((n, 1)))
        assert abs(out.data.var() / np.exp(logvar_val) - 1.0) < 0.03


class TestDecodeStep:
    def test_mlp_zero_weights_zero_output(self):
        model = small_model("mlp")
        for name in model.params:
            if name.startswith("dec"):
                model.params[name][:] = 0.0
        tape = Tape()
        leaves = wrap_leaves(tape, model)
        x = tape.leaf(np.ones((4, 8)))
        theta = tape.leaf(np.ones((4, 3)))
        pred, _ = decode_step(tape, leaves, model, x, theta)
        assert np.array_equal(pred.data, np.zeros((4, 8)))

    @pytest.mark.parametrize("kind", ["mlp", "transformer", "vcd", "spartan"])
    @pytest.mark.parametrize("token_mode", ["per-dim", "per-object"])
    def test_output_dimension(self, kind, token_mode):
        model = small_model(kind, token_mode)
        tape = Tape()
        leaves = wrap_leaves(tape, model)
        x = tape.leaf(np.random.default_rng(0).uniform(-1, 1, (5, 8)))
        theta = tape.leaf(np.random.default_rng(1).uniform(0, 1, (5, 3)))
        pred, _ = decode_step(
            tape, leaves, model, x, theta, mode="train", rng=np.random.default_rng(2)
        )
        assert pred.shape == (5, 8)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ModelError):
            DecoderConfig(kind="nosuch")

    def test_spartan_forced_ones_equals_transformer_bitwise(self):
        spartan = small_model("spartan", seed=3)
        transformer = small_model("transformer", seed=3)
        transformer.params = {k: v.copy() for k, v in spartan.params.items()}
        x_np = np.random.default_rng(4).uniform(-1, 1, (3, 8))
        th_np = np.random.default_rng(5).uniform(0, 1, (3, 3))
        m = spartan.layout.tokens
        outs = []
        for model, forced in ((spartan, [np.ones((3, m, m))] * 2), (transformer, None)):
            tape = Tape()
            leaves = wrap_leaves(tape, model)
            pred, _ = decode_step(
                tape, leaves, model, tape.leaf(x_np), tape.leaf(th_np), forced_masks=forced
            )
            outs.append(pred.data)
        assert np.array_equal(outs[0], outs[1])

    @pytest.mark.parametrize("kind", ["mlp", "transformer", "vcd", "spartan"])
    def test_gradient_check_with_frozen_masks(self, kind):
        model = small_model(kind, seed=11)
        rng = np.random.default_rng(7)
        x_np = rng.uniform(-1, 1, (2, 8))
        th_np = rng.uniform(0.2, 1.0, (2, 3))
        m = model.layout.tokens
        forced_masks = [(rng.random((2, m, m)) > 0.4).astype(float) for _ in range(2)]
        blocks = model.layout.state_tokens + 3
        forced_gates = (rng.random((model.layout.state_tokens, blocks)) > 0.3).astype(float)
        # probe a slice of weights to keep the FD sweep small
        names = sorted(model.params)[:4]
        point = {n: model.params[n] for n in names}

        def fn(tape, ts):
            leaves = wrap_leaves(tape, model)
            leaves.update(ts)
            pred, _ = decode_step(
                tape, leaves, model, tape.leaf(x_np), tape.leaf(th_np),
                forced_masks=forced_masks, forced_gates=forced_gates,
            )
            return ad.tmean(ad.square(pred))

        assert finite_diff_check(fn, point, h=1e-5) < 1e-4


class TestMaskedAttention:
    def saturated(self, sign, mode):
        tape = Tape()
        tokens = tape.leaf(np.ones((1, 3, 1)))
        wq = tape.leaf([[4.0]])
        wk = tape.leaf([[sign * 5.0]])
        wv = tape.leaf([[1.0]])
        return tape, masked_attention(
            tape, wq, wk, wv, tokens, mode, rng=np.random.default_rng(0)
        )

    def test_high_logits_match_unmasked(self):
        _, (out, mask, _) = self.saturated(+1.0, "train")
        assert mask.data.all()
        tape2 = Tape()
        tokens = tape2.leaf(np.ones((1, 3, 1)))
        out2, _, _ = masked_attention(
            tape2, tape2.leaf([[4.0]]), tape2.leaf([[5.0]]), tape2.leaf([[1.0]]), tokens, "ones"
        )
        assert np.array_equal(out.data, out2.data)

    def test_low_logits_residual_only(self):
        _, (out, mask, _) = self.saturated(-1.0, "eval")
        assert not mask.data.any()
        assert np.array_equal(out.data, np.ones((1, 3, 1)))

    def test_bernoulli_rate_at_zero(self):
        tape = Tape()
        tokens = tape.leaf(np.zeros((200, 16, 2)))
        _, mask, _ = masked_attention(
            tape, tape.leaf(np.zeros((2, 2))), tape.leaf(np.zeros((2, 2))),
            tape.leaf(np.eye(2)), tokens, "train", rng=np.random.default_rng(1),
        )
        assert abs(mask.data.mean() - 0.5) < 0.01


class TestPathCounts:
    def as_tensors(self, arrays):
        tape = Tape()
        return tape, [tape.leaf(a) for a in arrays]

    def test_zero_masks_identity(self):
        tape, masks = self.as_tensors([np.zeros((2, 4, 4))] * 3)
        out = path_counts(masks)
        assert np.array_equal(out.data, np.broadcast_to(np.eye(4), (2, 4, 4)))

    def test_single_all_ones(self):
        tape, masks = self.as_tensors([np.ones((1, 3, 3))])
        assert np.array_equal(path_counts(masks).data[0], np.ones((3, 3)) + np.eye(3))

    def test_two_hop_hand_case(self):
        a1 = np.zeros((1, 3, 3))
        a1[0, 0, 1] = 1.0
        a2 = np.zeros((1, 3, 3))
        a2[0, 1, 2] = 1.0
        tape, masks = self.as_tensors([a1, a2])
        out = path_counts(masks).data[0]
        expect = (a1[0] + np.eye(3)) @ (a2[0] + np.eye(3))
        assert np.array_equal(out, expect)
        assert out[0, 2] == 1.0

    @given(st.integers(0, 8), st.integers(0, 1))
    @settings(max_examples=20, deadline=None)
    def test_monotone_in_edges(self, flat_idx, layer):
        rng = np.random.default_rng(flat_idx * 2 + layer)
        base = [(rng.random((1, 3, 3)) > 0.5).astype(float) for _ in range(2)]
        i, j = divmod(flat_idx, 3)
        more = [a.copy() for a in base]
        more[layer][0, i % 3, j] = 1.0
        _, masks_a = self.as_tensors(base)
        pa = path_counts(masks_a).data
        _, masks_b = self.as_tensors(more)
        pb = path_counts(masks_b).data
        assert (pb >= pa).all()
        assert (np.diagonal(pa[0]) >= 1).all()


class TestVcdGates:
    def test_saturated_gamma_all_ones(self):
        tape = Tape()
        gamma = tape.leaf(np.full((4, 6), 20.0))
        out = vcd_gates(tape, gamma, "train", rng=np.random.default_rng(0))
        assert out.data.all()

    def test_same_seed_same_sample(self):
        draws = []
        for _ in range(2):
            tape = Tape()
            gamma = tape.leaf(np.zeros((5, 5)))
            draws.append(vcd_gates(tape, gamma, "train", rng=np.random.default_rng(9)).data)
        assert np.array_equal(draws[0], draws[1])

    def test_mean_gate_half_at_zero(self):
        tape = Tape()
        gamma = tape.leaf(np.zeros((300, 340)))
        out = vcd_gates(tape, gamma, "train", rng=np.random.default_rng(2))
        assert abs(out.data.mean() - 0.5) < 0.01


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        model = small_model("spartan", seed=21)
        model.dual_raw = 0.125
        extra = {"epoch": 3, "note": "x"}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, extra)
        back, back_extra = load_checkpoint(path)
        assert back_extra == extra
        assert back.dual_raw == model.dual_raw
        assert back.decoder == model.decoder and back.encoder == model.encoder
        assert set(back.params) == set(model.params)
        for name in model.params:
            assert np.array_equal(back.params[name], model.params[name])
