"""Gated cross-task module and decoder: identities, routing, gradients.

The gating/fusion identities are exercised through the public forward with
constructed weights, matching how the module is wired in the decoder.
"""

import numpy as np
import pytest

from physdiff.config import RunConfig
from physdiff.errors import ConfigError
from physdiff.numerics import ParamStore, gradient_check
from physdiff.piga import (
    TASKS,
    decoder_block_bwd,
    decoder_block_fwd,
    epsilon_bwd,
    epsilon_fwd,
    init_decoder_params,
    init_piga_params,
    piga_bwd,
    piga_fwd,
)


def tiny_cfg(d_model=6, n_heads=2, k_dec=1, d_embed=3, n_fut=2) -> RunConfig:
    cfg = RunConfig()
    cfg.model.d_model = d_model
    cfg.model.d_embed = d_embed
    cfg.model.gru_hidden = 4
    cfg.model.n_heads = n_heads
    cfg.model.k_enc = 1
    cfg.model.k_dec = k_dec
    cfg.model.ffn_mult = 2
    cfg.model.patch = 2
    cfg.generator.channels = 2
    cfg.generator.grid = 4
    cfg.data.m_hist = 2
    cfg.data.n_fut = n_fut
    return cfg.validate()


def make_piga(d_model=6, seed=0):
    params = ParamStore()
    rng = np.random.Generator(np.random.Philox(seed))
    init_piga_params(params, rng, "piga", d_model)
    return params


def zero_gate_weights(params, bias_value):
    """Force every gate MLP to a constant pre-sigmoid output."""
    for task in TASKS:
        for name in ("w1", "w2"):
            params.values[f"piga.gate_{task}.{name}"][:] = 0.0
        params.values[f"piga.gate_{task}.b1"][:] = 0.0
        params.values[f"piga.gate_{task}.b2"][:] = bias_value


def identity_projections(params, d_model):
    """proj_task = slice of the input channels; used by constructed-weight tests."""
    d_sub = d_model // 3
    eye = np.eye(d_model)
    for i, task in enumerate(TASKS):
        params.values[f"piga.proj_{task}.W"][:] = eye[:, i * d_sub:(i + 1) * d_sub]
        params.values[f"piga.proj_{task}.b"][:] = 0.0


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


class TestDecompose:
    def test_stream_shapes_d48(self):
        params = make_piga(48)
        x = np.random.default_rng(1).standard_normal((2, 5, 48))
        _, cache = piga_fwd(x, params, "piga")
        f = cache[1]
        for task in TASKS:
            assert f[task].shape == (2, 5, 16)

    def test_identity_slice_weights(self):
        params = make_piga(6)
        identity_projections(params, 6)
        x = np.random.default_rng(2).standard_normal((1, 4, 6))
        _, cache = piga_fwd(x, params, "piga")
        f = cache[1]
        np.testing.assert_array_equal(f["traj"], x[..., 0:2])
        np.testing.assert_array_equal(f["wind"], x[..., 2:4])
        np.testing.assert_array_equal(f["pres"], x[..., 4:6])

    def test_streams_pairwise_distinct_for_random_weights(self):
        params = make_piga(6, seed=3)
        x = np.random.default_rng(4).standard_normal((1, 3, 6))
        _, cache = piga_fwd(x, params, "piga")
        f = cache[1]
        for a in TASKS:
            for b in TASKS:
                if a < b:
                    assert np.abs(f[a] - f[b]).max() > 1e-6

    def test_indivisible_d_model_rejected(self):
        params = ParamStore()
        rng = np.random.default_rng(5)
        with pytest.raises(ConfigError):
            init_piga_params(params, rng, "piga", 8)


# ---------------------------------------------------------------------------
# cross-task attention (through the module, constructed weights)
# ---------------------------------------------------------------------------


class TestCrossTaskAttention:
    def test_constant_other_streams_pass_through_value(self):
        # all rows of both other streams equal v; with identity W_V and zero
        # value bias the attended output is exactly v for every row
        d_model, d_sub = 6, 2
        params = make_piga(d_model, seed=6)
        identity_projections(params, d_model)
        for task in TASKS:
            params.values[f"piga.attn_{task}.wv"][:] = np.eye(d_sub)
            params.values[f"piga.attn_{task}.bv"][:] = 0.0
        v = np.array([0.7, -1.3])
        x = np.zeros((1, 3, 6))
        x[..., 0:2] = np.random.default_rng(7).standard_normal((1, 3, 2))
        x[..., 2:4] = v  # wind stream constant
        x[..., 4:6] = v  # pressure stream constant
        _, cache = piga_fwd(x, params, "piga")
        a_traj = cache[2]["traj"][6]
        np.testing.assert_allclose(a_traj, np.broadcast_to(v, (1, 3, 2)),
                                   rtol=1e-12)

    def test_scalar_closed_form(self):
        # d_sub = 1, N = 1: two keys, softmax over two scalars by hand
        params = make_piga(3, seed=8)
        x = np.array([[[0.5, -1.0, 2.0]]])
        _, cache = piga_fwd(x, params, "piga")
        f = cache[1]
        others, kv, q, k, v, weights, a, *_ = cache[2]["traj"]
        q_hand = f["traj"] * params["piga.attn_traj.wq"][0, 0] \
            + params["piga.attn_traj.bq"][0]
        kv_hand = np.array([f["wind"][0, 0, 0], f["pres"][0, 0, 0]])
        k_hand = kv_hand * params["piga.attn_traj.wk"][0, 0]
        v_hand = kv_hand * params["piga.attn_traj.wv"][0, 0] \
            + params["piga.attn_traj.bv"][0]
        scores = q_hand[0, 0, 0] * k_hand / np.sqrt(1.0)
        w_hand = np.exp(scores - scores.max())
        w_hand /= w_hand.sum()
        a_hand = (w_hand * v_hand).sum()
        np.testing.assert_allclose(a[0, 0, 0], a_hand, rtol=1e-12)

    def test_attended_rows_in_value_hull(self):
        params = make_piga(6, seed=9)
        rng = np.random.default_rng(10)
        for _ in range(20):
            x = rng.standard_normal((2, 4, 6)) * 3
            _, cache = piga_fwd(x, params, "piga")
            for task in TASKS:
                _, kv, q, k, v, weights, a, *_ = cache[2][task]
                lo = v.min(axis=-2, keepdims=True)
                hi = v.max(axis=-2, keepdims=True)
                assert np.all(a >= lo - 1e-9)
                assert np.all(a <= hi + 1e-9)


# ---------------------------------------------------------------------------
# gate and fusion identities
# ---------------------------------------------------------------------------


class TestGateAndFuse:
    def get_gate_and_streams(self, params, x):
        out, cache = piga_fwd(x, params, "piga")
        f = cache[1]
        gates = {t: cache[2][t][10] for t in TASKS}
        attended = {t: cache[2][t][6] for t in TASKS}
        d_sub = cache[4]
        fused_in = {t: cache[3][..., i * d_sub:(i + 1) * d_sub]
                    for i, t in enumerate(TASKS)}
        return out, f, gates, attended, fused_in

    def test_gate_saturates_low(self):
        params = make_piga(6, seed=11)
        zero_gate_weights(params, -20.0)
        x = np.random.default_rng(12).standard_normal((1, 3, 6))
        _, f, gates, attended, fused_in = self.get_gate_and_streams(params, x)
        for t in TASKS:
            assert np.all(gates[t] < 1e-8)
            np.testing.assert_allclose(fused_in[t], f[t], atol=1e-7)

    def test_gate_saturates_high(self):
        params = make_piga(6, seed=13)
        zero_gate_weights(params, 20.0)
        x = np.random.default_rng(14).standard_normal((1, 3, 6))
        _, f, gates, attended, fused_in = self.get_gate_and_streams(params, x)
        for t in TASKS:
            assert np.all(gates[t] > 1 - 1e-8)
            np.testing.assert_allclose(fused_in[t], attended[t], atol=1e-7)

    def test_zero_gate_mlp_gives_exactly_half(self):
        params = make_piga(6, seed=15)
        zero_gate_weights(params, 0.0)
        x = np.random.default_rng(16).standard_normal((1, 3, 6))
        _, f, gates, attended, fused_in = self.get_gate_and_streams(params, x)
        for t in TASKS:
            np.testing.assert_array_equal(gates[t], 0.5)
            np.testing.assert_allclose(fused_in[t],
                                       0.5 * f[t] + 0.5 * attended[t], rtol=1e-12)

    def test_scalar_convex_combination(self):
        # g = 0.25, f = 4, A = 8 -> 0.75*4 + 0.25*8 = 5
        g, f, a = 0.25, 4.0, 8.0
        assert (1 - g) * f + g * a == 5.0

    def test_fusion_identity_weights_reproduce_concatenation(self):
        params = make_piga(6, seed=17)
        params.values["piga.fuse.W"][:] = np.eye(6)
        params.values["piga.fuse.b"][:] = 0.0
        x = np.random.default_rng(18).standard_normal((1, 3, 6))
        out, _, _, _, fused_in = self.get_gate_and_streams(params, x)
        expected = np.concatenate([fused_in[t] for t in TASKS], axis=-1)
        np.testing.assert_array_equal(out, expected)

    def test_fusion_is_per_position(self):
        params = make_piga(6, seed=19)
        x = np.random.default_rng(20).standard_normal((1, 5, 6))
        out, _ = piga_fwd(x, params, "piga")
        perm = np.array([3, 0, 4, 1, 2])
        out_perm, _ = piga_fwd(x[:, perm], params, "piga")
        np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-12)

    def test_fusion_random_case_vs_matrix_oracle(self):
        params = make_piga(6, seed=21)
        x = np.random.default_rng(22).standard_normal((2, 3, 6))
        out, cache = piga_fwd(x, params, "piga")
        np.testing.assert_allclose(
            out, cache[3] @ params["piga.fuse.W"] + params["piga.fuse.b"],
            rtol=1e-12)


# ---------------------------------------------------------------------------
# routing barriers
# ---------------------------------------------------------------------------


class TestRouting:
    def run_bwd(self, route_task, seed=23):
        params = make_piga(6, seed=seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((2, 3, 6))
        grad = rng.standard_normal((2, 3, 6))
        out, cache = piga_fwd(x, params, "piga")
        params.zero_grads()
        piga_bwd(grad, cache, params, "piga", route_task=route_task)
        return params

    def test_foreign_projections_get_exactly_zero(self):
        params = self.run_bwd("traj")
        for foreign in ("wind", "pres"):
            assert np.all(params.grads[f"piga.proj_{foreign}.W"] == 0.0)
            assert np.all(params.grads[f"piga.proj_{foreign}.b"] == 0.0)
        assert np.abs(params.grads["piga.proj_traj.W"]).max() > 0

    def test_symmetric_for_other_tasks(self):
        for task in TASKS:
            params = self.run_bwd(task)
            for other in TASKS:
                g = params.grads[f"piga.proj_{other}.W"]
                if other == task:
                    assert np.abs(g).max() > 0
                else:
                    assert np.all(g == 0.0)

    def test_unrouted_backward_reaches_all_projections(self):
        params = self.run_bwd(None)
        for task in TASKS:
            assert np.abs(params.grads[f"piga.proj_{task}.W"]).max() > 0

    def test_non_projection_parameters_receive_gradient_when_routed(self):
        params = self.run_bwd("traj")
        # cross-task attention and gates of every stream still learn
        for task in TASKS:
            assert np.abs(params.grads[f"piga.attn_{task}.wv"]).max() > 0
            assert np.abs(params.grads[f"piga.gate_{task}.w2"]).max() > 0
        assert np.abs(params.grads["piga.fuse.W"]).max() > 0

    def test_component_sum_equals_unrouted_x_gradient_excluding_barriers(self):
        # backward is linear: summing the three routed passes equals the full
        # gradient on every parameter that no barrier blocks
        params = make_piga(6, seed=31)
        rng = np.random.default_rng(32)
        x = rng.standard_normal((1, 2, 6))
        grad = rng.standard_normal((1, 2, 6))
        out, cache = piga_fwd(x, params, "piga")
        params.zero_grads()
        piga_bwd(grad, cache, params, "piga", route_task=None)
        full = {k: v.copy() for k, v in params.grads.items()}
        params.zero_grads()
        for t in TASKS:
            piga_bwd(grad / 3.0, cache, params, "piga", route_task=t)
        for task in TASKS:
            np.testing.assert_allclose(
                params.grads[f"piga.proj_{task}.W"] * 3.0,
                full[f"piga.proj_{task}.W"], rtol=1e-9)


# ---------------------------------------------------------------------------
# gradients through the module
# ---------------------------------------------------------------------------


class TestPigaGradients:
    def test_gradient_check(self):
        params = make_piga(6, seed=33)
        rng = np.random.default_rng(34)
        x = rng.standard_normal((2, 3, 6))
        proj = 0.05 * rng.standard_normal((2, 3, 6))
        params.add("x", x)

        def loss_fn():
            params.zero_grads()
            out, cache = piga_fwd(params["x"], params, "piga")
            gx = piga_bwd(proj, cache, params, "piga")
            params.accum("x", gx)
            return float(np.sum(proj * out))

        err = gradient_check(loss_fn, params, n_samples=250,
                             rng=np.random.default_rng(35))
        assert err < 1e-4, f"module gradient error {err}"


# ---------------------------------------------------------------------------
# decoder block and full noise predictor
# ---------------------------------------------------------------------------


def make_decoder(cfg, seed=0):
    params = ParamStore()
    rng = np.random.Generator(np.random.Philox(seed))
    init_decoder_params(params, rng, cfg)
    return params


class TestDecoderBlock:
    def test_zeroed_output_projections_give_identity(self):
        cfg = tiny_cfg()
        params = make_decoder(cfg, seed=36)
        p = "dec.block0"
        for sub in ("self_attn", "cross_attn"):
            params.values[f"{p}.{sub}.wo"][:] = 0.0
            params.values[f"{p}.{sub}.bo"][:] = 0.0
        params.values[f"{p}.piga.fuse.W"][:] = 0.0
        params.values[f"{p}.piga.fuse.b"][:] = 0.0
        params.values[f"{p}.ffn.w2"][:] = 0.0
        params.values[f"{p}.ffn.b2"][:] = 0.0
        rng = np.random.default_rng(37)
        x = rng.standard_normal((2, 3, cfg.model.d_model))
        ctx = rng.standard_normal((2, 5, cfg.model.d_model))
        out, _ = decoder_block_fwd(x, ctx, params, p, cfg, piga_enabled=True)
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("n", [1, 4, 8])
    def test_shape_preserved(self, n):
        cfg = tiny_cfg()
        params = make_decoder(cfg, seed=38)
        rng = np.random.default_rng(39)
        x = rng.standard_normal((2, n, cfg.model.d_model))
        ctx = rng.standard_normal((2, 5, cfg.model.d_model))
        out, _ = decoder_block_fwd(x, ctx, params, "dec.block0", cfg, True)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out))

    def test_piga_disabled_is_pure_passthrough_of_that_sublayer(self):
        cfg = tiny_cfg()
        params = make_decoder(cfg, seed=40)
        p = "dec.block0"
        rng = np.random.default_rng(41)
        x = rng.standard_normal((1, 3, cfg.model.d_model))
        ctx = rng.standard_normal((1, 5, cfg.model.d_model))
        out_off, _ = decoder_block_fwd(x, ctx, params, p, cfg, piga_enabled=False)
        params.values[f"{p}.piga.fuse.W"][:] = 0.0
        params.values[f"{p}.piga.fuse.b"][:] = 0.0
        out_zeroed, _ = decoder_block_fwd(x, ctx, params, p, cfg, piga_enabled=True)
        np.testing.assert_allclose(out_off, out_zeroed, rtol=1e-12)

    def test_gradient_check_through_block(self):
        cfg = tiny_cfg()
        params = make_decoder(cfg, seed=42)
        rng = np.random.default_rng(43)
        x = rng.standard_normal((2, 3, cfg.model.d_model))
        ctx = rng.standard_normal((2, 4, cfg.model.d_model))
        proj = 0.05 * rng.standard_normal(x.shape)
        params.add("x", x)
        params.add("ctx", ctx)

        def loss_fn():
            params.zero_grads()
            out, cache = decoder_block_fwd(params["x"], params["ctx"], params,
                                           "dec.block0", cfg, True)
            gx, gctx = decoder_block_bwd(proj, cache, params, "dec.block0",
                                         cfg, True)
            params.accum("x", gx)
            params.accum("ctx", gctx)
            return float(np.sum(proj * out))

        err = gradient_check(loss_fn, params, n_samples=300,
                             rng=np.random.default_rng(44))
        assert err < 1e-4, f"block gradient error {err}"


class TestEpsilonNetwork:
    def test_shape_contract(self):
        cfg = tiny_cfg(d_model=48, n_heads=4, k_dec=2, d_embed=16, n_fut=4)
        params = make_decoder(cfg, seed=45)
        rng = np.random.default_rng(46)
        z_t = rng.standard_normal((3, 4, 16))
        ctx = rng.standard_normal((3, 8, 48))
        eps_hat, _ = epsilon_fwd(z_t, ctx, params, cfg)
        assert eps_hat.shape == z_t.shape

    def test_deterministic(self):
        cfg = tiny_cfg()
        params = make_decoder(cfg, seed=47)
        rng = np.random.default_rng(48)
        z_t = rng.standard_normal((2, cfg.data.n_fut, cfg.model.d_embed))
        ctx = rng.standard_normal((2, 5, cfg.model.d_model))
        a, _ = epsilon_fwd(z_t, ctx, params, cfg)
        b, _ = epsilon_fwd(z_t, ctx, params, cfg)
        np.testing.assert_array_equal(a, b)

    def test_gradient_check_sampled_parameters(self):
        cfg = tiny_cfg(k_dec=2)
        params = make_decoder(cfg, seed=49)
        rng = np.random.default_rng(50)
        z_t = rng.standard_normal((2, cfg.data.n_fut, cfg.model.d_embed))
        ctx = rng.standard_normal((2, 5, cfg.model.d_model))
        proj = 0.05 * rng.standard_normal(z_t.shape)
        params.add("z_t", z_t)
        params.add("ctx", ctx)

        def loss_fn():
            params.zero_grads()
            eps_hat, cache = epsilon_fwd(params["z_t"], params["ctx"], params, cfg)
            gz, gctx = epsilon_bwd(proj, cache, params, cfg)
            params.accum("z_t", gz)
            params.accum("ctx", gctx)
            return float(np.sum(proj * eps_hat))

        err = gradient_check(loss_fn, params, n_samples=200,
                             rng=np.random.default_rng(51))
        assert err < 1e-4, f"noise predictor gradient error {err}"
