"""Stress index and dynamic-graph stage: sigmoid aggregation oracles, source
cosine matrices, gated refinement arithmetic, top-k sparsification vs a sort
oracle, stress-modulated fusion bounds, GAT residual wiring."""

import numpy as np
import pytest

import marketpulse.tensor as tz
from marketpulse.config import ModelConfig
from marketpulse.dyngraph import DynamicGraph, StressModel, stress_indicators
from marketpulse.optim import ParamStore
from marketpulse.schema import feature_index

from _util import dtype64, random_window


def small_cfg(**kw):
    base = dict(window=6, hidden_dim=8, context_dim=4, latent_dim=4, heads=2,
                gcn_layers=1, top_k=3)
    base.update(kw)
    return ModelConfig(**base)


def build_graph(cfg=None, seed=0):
    cfg = cfg or small_cfg()
    store = ParamStore()
    g = DynamicGraph(store, np.random.default_rng(seed), cfg)
    return g, store, cfg


def rand_zc(rng, n=6, cfg=None):
    cfg = cfg or small_cfg()
    z = tz.tensor(rng.standard_normal((n, 2 * cfg.hidden_dim)))
    c = tz.tensor(np.tanh(rng.standard_normal((n, cfg.context_dim))))
    return z, c


def sym_prior(rng, n=6, p=0.5):
    a = (rng.random((n, n)) < p).astype(np.float64)
    a = np.triu(a, 1)
    return a + a.T


class TestStress:
    def test_indicator_construction(self, rng):
        x = random_window(rng, 5, 4)
        raw = stress_indicators(x)
        last = x[:, -1, :]
        cvar = last[:, feature_index("cvar_95")]
        upvol = last[:, feature_index("upside_volatility")]
        assert raw[0] == pytest.approx(0.5 * (cvar + upvol).mean())
        zcol = last[:, feature_index("extreme_return_z")]
        assert raw[1] == pytest.approx((np.abs(zcol) > 2).mean())
        assert raw[2] == pytest.approx(last[:, feature_index("market_correlation")].mean())
        assert raw[3] == pytest.approx(last[:, feature_index("bid_ask_spread")].mean())

    def test_unfitted_bounds_raise(self, rng):
        sm = StressModel(ParamStore(), rng)
        with pytest.raises(RuntimeError, match="bounds not fitted"):
            sm(random_window(rng, 4, 3))

    def test_all_zero_indicators_give_half(self, rng):
        sm = StressModel(ParamStore(), rng)
        sm.set_bounds(np.zeros(4), np.ones(4))
        psi = tz.sigmoid(tz.tsum(tz.mul(sm.beta, tz.constant(np.zeros(4)))))
        assert float(psi.data) == pytest.approx(0.5)

    def test_unit_indicators_unit_betas_give_sigma4(self):
        sm = StressModel(ParamStore(), np.random.default_rng(0))
        sm.set_bounds(np.zeros(4), np.ones(4))
        norm = sm.normalize(np.ones(4))
        np.testing.assert_array_equal(norm, np.ones(4))
        psi = tz.sigmoid(tz.tsum(tz.mul(sm.beta, tz.constant(norm))))
        assert float(psi.data) == pytest.approx(1 / (1 + np.exp(-4.0)), abs=1e-6)
        assert float(psi.data) == pytest.approx(0.982, abs=5e-4)

    def test_normalization_clamps_and_bounds_freeze(self, rng):
        sm = StressModel(ParamStore(), rng)
        rows = rng.random((10, 4))
        sm.fit_bounds(rows)
        np.testing.assert_array_equal(sm.lo, rows.min(axis=0))
        out = sm.normalize(rows.max(axis=0) + 5.0)
        np.testing.assert_array_equal(out, np.ones(4))
        out = sm.normalize(rows.min(axis=0) - 5.0)
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_psi_strictly_inside_unit_interval_and_monotone(self, rng):
        sm = StressModel(ParamStore(), rng)
        sm.set_bounds(np.zeros(4), np.ones(4))
        for _ in range(50):
            x = random_window(rng, 4, 3)
            psi, ind = sm(x)
            assert 0.0 < float(psi.data) < 1.0
            assert np.all(ind.normalized >= 0) and np.all(ind.normalized <= 1)
        # monotone in each indicator when beta > 0
        base = np.full(4, 0.3)
        lo = tz.sigmoid(tz.tsum(tz.mul(sm.beta, tz.constant(base)))).data
        for k in range(4):
            bumped = base.copy()
            bumped[k] = 0.9
            hi = tz.sigmoid(tz.tsum(tz.mul(sm.beta, tz.constant(bumped)))).data
            assert hi > lo


class TestSources:
    def test_cosine_matrices_symmetric_unit_diag(self, rng):
        g, _, _ = build_graph()
        z, c = rand_zc(rng)
        a_temp, a_ctx, a_edge = g.source_graphs(z, c)
        for m in (a_temp.data, a_ctx.data):
            np.testing.assert_allclose(m, m.T, atol=1e-6)
            np.testing.assert_allclose(np.diag(m), 1.0, atol=1e-6)
            assert np.all(np.abs(m) <= 1.0 + 1e-6)

    def test_identical_embeddings_give_unit_similarity(self, rng):
        g, _, cfg = build_graph()
        z, c = rand_zc(rng)
        z.data[1] = z.data[0]
        a_temp, _, _ = g.source_graphs(z, c)
        assert a_temp.data[0, 1] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_contexts_give_zero(self):
        g, _, cfg = build_graph()
        c = np.zeros((2, cfg.context_dim))
        c[0, 0] = 1.0
        c[1, 1] = 1.0
        z = np.ones((2, 2 * cfg.hidden_dim))
        _, a_ctx, _ = g.source_graphs(tz.constant(z), tz.constant(c))
        assert a_ctx.data[0, 1] == pytest.approx(0.0, abs=1e-6)

    def test_edge_scores_symmetric(self, rng):
        g, _, _ = build_graph()
        z, c = rand_zc(rng)
        a_edge = g.edge_scores(z, c)
        np.testing.assert_allclose(a_edge.data, a_edge.data.T, atol=1e-5)
        assert np.all(np.abs(a_edge.data) <= 1.0 + 1e-5)

    def test_zero_norm_embedding_warns(self, rng):
        g, _, _ = build_graph()
        z, c = rand_zc(rng)
        z.data[2] = 0.0
        with pytest.warns(RuntimeWarning, match="zero-norm"):
            g.source_graphs(z, c)


def gate_oracle(mixed, a_edge, prior):
    sig = 1.0 / (1.0 + np.exp(-a_edge))
    return mixed * sig + 0.1 * a_edge + 0.05 * prior


class TestRefinement:
    def test_gate_formula_weights_100(self, rng):
        # mixed == A_temp, A_edge == 0, prior == 0  =>  0.5 * A_temp
        a_temp = rng.random((4, 4))
        out = gate_oracle(a_temp, np.zeros((4, 4)), np.zeros((4, 4)))
        np.testing.assert_allclose(out, 0.5 * a_temp, rtol=1e-12)

    def test_gate_formula_weights_001(self, rng):
        # mixed == prior, A_edge == 0  =>  0.55 * prior
        prior = sym_prior(rng, 4)
        out = gate_oracle(prior, np.zeros((4, 4)), prior)
        np.testing.assert_allclose(out, 0.55 * prior, rtol=1e-12)

    def test_class_matches_decomposed_oracle(self, rng):
        g, _, _ = build_graph()
        z, c = rand_zc(rng)
        prior = sym_prior(rng)
        a_temp, a_ctx, a_edge = g.source_graphs(z, c)
        w = tz.softmax(tz.sigmoid(g.source_logits), axis=-1).data
        assert w.sum() == pytest.approx(1.0, abs=1e-6)
        mixed = w[0] * a_temp.data + w[1] * a_ctx.data + w[2] * prior
        expect = gate_oracle(mixed.astype(np.float64),
                             a_edge.data.astype(np.float64), prior)
        got = g.interpolate_and_refine(z, c, prior).data
        np.testing.assert_allclose(got, expect, rtol=1e-4, atol=1e-6)

    def test_zeroed_edge_mlp_gives_zero_edge_scores(self, rng):
        g, store, _ = build_graph()
        store["graph.edge.out.w"].data[:] = 0.0
        store["graph.edge.out.b"].data[:] = 0.0
        z, c = rand_zc(rng)
        _, _, a_edge = g.source_graphs(z, c)
        np.testing.assert_array_equal(a_edge.data, 0.0)


class TestTopK:
    def test_support_matches_sort_oracle(self, rng):
        g, _, cfg = build_graph(small_cfg(top_k=3))
        a = tz.tensor(rng.standard_normal((7, 7)))
        _, support = g.topk_sparsify(a)
        for i in range(7):
            expect = set(np.argsort(a.data[i])[-cfg.top_k:])
            assert set(np.flatnonzero(support[i])) == expect

    def test_exactly_k_retained_distinct_rows(self, rng):
        g, _, cfg = build_graph(small_cfg(top_k=4))
        vals = rng.permutation(64).reshape(8, 8).astype(np.float64)  # distinct
        _, support = g.topk_sparsify(tz.tensor(vals))
        np.testing.assert_array_equal(support.sum(axis=1), cfg.top_k)

    def test_threshold_entry_is_retained(self):
        g, _, _ = build_graph(small_cfg(top_k=2))
        row = np.array([[5.0, 4.0, 3.0, 2.0, 1.0]])
        a = np.repeat(row, 5, axis=0)
        _, support = g.topk_sparsify(tz.tensor(a))
        # tau = 4.0; the mask at the tau entry is sigma(0) = 0.5, counted in
        assert support[0, 1]
        assert not support[0, 2]

    def test_tie_rows_keep_at_least_k(self):
        g, _, _ = build_graph(small_cfg(top_k=2))
        a = np.array([[1.0, 2.0, 2.0, 2.0, 0.0]])
        a = np.repeat(a, 5, axis=0)
        _, support = g.topk_sparsify(tz.tensor(a))
        assert support[0].sum() >= 2  # ties inflate cardinality, never shrink

    def test_rows_sum_to_one_over_support(self, rng):
        g, _, _ = build_graph(small_cfg(top_k=3))
        a_learned, support = g.topk_sparsify(tz.tensor(rng.standard_normal((6, 6))))
        sums = (a_learned.data * support).sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert np.all(a_learned.data[~support] <= 1e-12)

    def test_k_not_less_than_n_rejected(self, rng):
        g, _, _ = build_graph(small_cfg(top_k=6))
        with pytest.raises(ValueError, match="top_k"):
            g.topk_sparsify(tz.tensor(rng.standard_normal((6, 6))))

    def test_gradient_skips_threshold_path(self, rng):
        # perturbing the tau-setting entry moves tau (and every mask in its
        # row) in the forward pass, but the backward pass treats tau and the
        # hard support as constants: the analytic gradient must match finite
        # differences computed with both frozen, and must NOT match the
        # full-forward finite difference that lets tau move
        vals = np.array([[0.9, 0.5, 0.1, -0.4],
                         [0.8, 0.6, 0.2, -0.2],
                         [0.7, 0.3, 0.0, -0.6],
                         [0.95, 0.45, 0.15, -0.5]])
        i, j = 0, 1  # the tau-setting entry of row 0 (2nd largest = 0.5)
        with dtype64():
            g, _, cfg = build_graph(small_cfg(top_k=2))
            a = tz.tensor(vals, requires_grad=True)
            out, support0 = g.topk_sparsify(a)
            tz.backward(tz.tsum(tz.mul(out, out)))
            analytic = a.grad.copy()

            tau0 = np.partition(vals, vals.shape[1] - 2,
                                axis=-1)[:, vals.shape[1] - 2][:, None]
            neg0 = np.where(support0, 0.0, -1e9)

            def loss_frozen(vmat):
                t = tz.constant(vmat)
                mask = tz.sigmoid(tz.mul(tz.sub(t, tz.constant(tau0)), 5.0))
                kept = tz.mul(t, mask)
                sym = tz.mul(tz.add(kept, tz.transpose(kept)), 0.5)
                sm = tz.softmax(tz.add(sym, tz.constant(neg0)), axis=-1)
                return float(tz.tsum(tz.mul(sm, sm)).data)

            def loss_full(vmat):
                o, _ = g.topk_sparsify(tz.constant(vmat))
                return float(tz.tsum(tz.mul(o, o)).data)

            eps = 1e-6
            up, dn = vals.copy(), vals.copy()
            up[i, j] += eps
            dn[i, j] -= eps
            with tz.no_grad():
                fd_frozen = (loss_frozen(up) - loss_frozen(dn)) / (2 * eps)
                fd_full = (loss_full(up) - loss_full(dn)) / (2 * eps)
        assert analytic[i, j] == pytest.approx(fd_frozen, rel=1e-3, abs=1e-7)
        assert abs(fd_full - analytic[i, j]) > 100 * abs(
            fd_frozen - analytic[i, j]) + 1e-6


class TestFusion:
    def test_alpha_initial_values_match_sigmoid_oracle(self):
        g, _, _ = build_graph()
        a_learned = tz.constant(np.eye(4))
        prior = np.zeros((4, 4))
        _, alpha1 = g.fuse(a_learned, prior, tz.constant(1.0))
        assert float(alpha1.data) == pytest.approx(0.5, abs=1e-6)
        _, alpha0 = g.fuse(a_learned, prior, tz.constant(0.0))
        assert float(alpha0.data) == pytest.approx(1 / (1 + np.exp(-0.5)), abs=1e-6)
        assert float(alpha0.data) == pytest.approx(0.622, abs=5e-4)

    def test_alpha_clamped_to_bounds(self, rng):
        g, store, _ = build_graph()
        store["graph.alpha_base"].data[:] = 10.0
        _, alpha = g.fuse(tz.constant(np.eye(3)), np.zeros((3, 3)),
                          tz.constant(0.5))
        assert float(alpha.data) == pytest.approx(0.8)
        store["graph.alpha_base"].data[:] = -10.0
        _, alpha = g.fuse(tz.constant(np.eye(3)), np.zeros((3, 3)),
                          tz.constant(0.5))
        assert float(alpha.data) == pytest.approx(0.2)

    def test_alpha_decreases_with_stress(self, rng):
        g, _, _ = build_graph()
        al = []
        for psi in (0.1, 0.5, 0.9):
            _, alpha = g.fuse(tz.constant(np.eye(3)), np.zeros((3, 3)),
                              tz.constant(psi))
            al.append(float(alpha.data))
        assert al[0] > al[1] > al[2]  # beta_alpha initialized negative

    def test_fixed_modes(self, rng):
        prior = sym_prior(rng, 5)
        a_learned = tz.constant(rng.random((5, 5)))
        g1, _, _ = build_graph(small_cfg(alpha_mode="fixed", alpha_fixed=1.0))
        fused, alpha = g1.fuse(a_learned, prior, tz.constant(0.3))
        assert alpha == 1.0
        np.testing.assert_allclose(fused.data, prior, atol=1e-6)
        g0, _, _ = build_graph(small_cfg(alpha_mode="fixed", alpha_fixed=0.0))
        fused, _ = g0.fuse(a_learned, prior, tz.constant(0.3))
        np.testing.assert_allclose(fused.data, a_learned.data, atol=1e-6)

    def test_fused_is_convex_combination(self, rng):
        g, _, _ = build_graph()
        prior = sym_prior(rng, 6)
        a_learned = tz.constant(rng.random((6, 6)))
        fused, _ = g.fuse(a_learned, prior, tz.constant(0.7))
        lo = np.minimum(prior, a_learned.data) - 1e-6
        hi = np.maximum(prior, a_learned.data) + 1e-6
        assert np.all(fused.data >= lo) and np.all(fused.data <= hi)

    def test_learned_mode_ignores_psi(self):
        g, _, _ = build_graph(small_cfg(alpha_mode="learned"))
        _, a1 = g.fuse(tz.constant(np.eye(3)), np.zeros((3, 3)), tz.constant(0.1))
        _, a2 = g.fuse(tz.constant(np.eye(3)), np.zeros((3, 3)), tz.constant(0.9))
        assert float(a1.data) == pytest.approx(float(a2.data))


class TestGatAndAssembly:
    def test_residual_upper_half_unchanged(self, rng):
        g, _, cfg = build_graph()
        z, c = rand_zc(rng)
        prior = sym_prior(rng)
        state, z_final = g(z, c, prior, tz.constant(0.4))
        d = cfg.hidden_dim
        np.testing.assert_array_equal(z_final.data[:, d:], z.data[:, d:])

    def test_zeroed_gat_output_gives_identity_residual(self, rng):
        g, store, _ = build_graph()
        store["graph.gat.out.w"].data[:] = 0.0
        store["graph.gat.out.b"].data[:] = 0.0
        z, c = rand_zc(rng)
        prior = sym_prior(rng)
        _, z_final = g(z, c, prior, tz.constant(0.4))
        np.testing.assert_allclose(z_final.data, z.data, atol=1e-7)

    def test_isolated_row_attends_to_itself(self, rng):
        g, _, cfg = build_graph()
        z, _ = rand_zc(rng, n=5)
        a_fused = np.abs(sym_prior(rng, 5)) + np.eye(5)
        a_fused[0, :] = 0.0  # cut node 0's outgoing support entirely
        z_ref_full = g.gat_refine(z, tz.constant(a_fused))
        z_solo = tz.tensor(z.data[0:1])
        z_ref_solo = g.gat_refine(z_solo, tz.constant(np.ones((1, 1))))
        np.testing.assert_allclose(z_ref_full.data[0], z_ref_solo.data[0],
                                   rtol=1e-5, atol=1e-6)

    def test_full_stage_shapes_and_support(self, rng):
        g, _, cfg = build_graph()
        z, c = rand_zc(rng)
        prior = sym_prior(rng)
        state, z_final = g(z, c, prior, tz.constant(0.3))
        n = z.shape[0]
        assert state.a_fused.shape == (n, n)
        assert state.a_learned.shape == (n, n)
        assert state.support.shape == (n, n)
        assert z_final.shape == z.shape

    def test_multi_source_off_uses_embedding_cosine(self, rng):
        g_on, _, _ = build_graph(small_cfg(multi_source=True))
        g_off, _, _ = build_graph(small_cfg(multi_source=False), seed=0)
        z, c = rand_zc(rng)
        prior = sym_prior(rng)
        s_on, _ = g_on(z, c, prior, tz.constant(0.5))
        s_off, _ = g_off(z, c, prior, tz.constant(0.5))
        assert not np.allclose(s_on.a_learned.data, s_off.a_learned.data)
