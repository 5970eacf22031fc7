"""Mixture-of-experts stage: gating, temperature, routing modes, experts."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import marketpulse.tensor as tz
from marketpulse.config import ModelConfig
from marketpulse.moe import (
    BETA_STRESS,
    MixtureOfExperts,
    category_signals,
    expert_groups,
)
from marketpulse.optim import ParamStore
from marketpulse.schema import CATEGORY_NAMES, CATEGORY_SLICES, N_FEATURES


def small_cfg(**kw) -> ModelConfig:
    cfg = ModelConfig(hidden_dim=8, context_dim=8, latent_dim=6, heads=4, **kw)
    cfg.validate()
    return cfg


def make_moe(seed: int = 0, **kw) -> MixtureOfExperts:
    store = ParamStore()
    rng = np.random.default_rng(seed)
    moe = MixtureOfExperts(store, rng, small_cfg(**kw))
    moe.store = store
    return moe


def make_inputs(seed: int, n: int, cfg: ModelConfig, psi: float = 0.3):
    rng = np.random.default_rng(seed)
    z = tz.tensor(rng.standard_normal((n, 2 * cfg.hidden_dim)) * 0.5)
    h = tz.tensor(rng.standard_normal((n, cfg.hidden_dim)) * 0.5)
    x = tz.tensor(rng.standard_normal((n, N_FEATURES)))
    return z, h, tz.tensor(np.array(psi)), x


def np_softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- groups


def test_expert_groups_canonical_four():
    groups = expert_groups(4)
    assert [g.name for g in groups] == [
        "price_shock", "liquidity", "contagion", "momentum"]
    for g, cat in zip(groups, CATEGORY_NAMES):
        assert g.cols == CATEGORY_SLICES[cat]
        assert g.categories == (cat,)
    assert [g.use_spat for g in groups] == [False, False, True, False]


@pytest.mark.parametrize("k", [1, 2, 4, 6])
def test_expert_groups_cover_all_features(k):
    groups = expert_groups(k)
    assert len(groups) == k
    covered = sorted(
        i for g in groups for i in range(g.cols.start, g.cols.stop))
    assert covered == list(range(N_FEATURES))  # partition, no gaps/overlap
    for g in groups:
        assert g.cols.stop > g.cols.start
        assert set(g.categories) <= set(CATEGORY_NAMES)


def test_expert_groups_rejects_unsupported_count():
    with pytest.raises(ValueError, match="unsupported expert_count"):
        expert_groups(3)


# ------------------------------------------------------- category signals


def test_category_signals_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, N_FEATURES)).astype(np.float32)
    got = category_signals(tz.tensor(x)).data
    raw = np.stack(
        [np.abs(x[:, CATEGORY_SLICES[c]]).mean(axis=1) for c in CATEGORY_NAMES],
        axis=1)
    mu = raw.mean(axis=1, keepdims=True)
    sig = np.sqrt(((raw - mu) ** 2).mean(axis=1, keepdims=True))
    want = (raw - mu) / (sig + 1e-8)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)
    assert got.shape == (7, 4)
    np.testing.assert_allclose(got.mean(axis=1), 0.0, atol=1e-5)


def test_category_signals_respond_to_their_own_category():
    # inflating one category's magnitudes must raise that signal's rank
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, N_FEATURES)).astype(np.float32)
    for ci, cat in enumerate(CATEGORY_NAMES):
        boosted = x.copy()
        boosted[:, CATEGORY_SLICES[cat]] *= 10.0
        sig = category_signals(tz.tensor(boosted)).data
        assert (sig.argmax(axis=1) == ci).all()


# ----------------------------------------------------------------- gating


def test_routing_weights_are_simplex_rows():
    moe = make_moe()
    z, h, psi, x = make_inputs(1, 6, moe.cfg)
    out = moe(z, h, x, psi)
    w = out.w.data
    assert w.shape == (6, 4)
    assert (w > 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8),
       psi=st.floats(0.0, 1.0))
def test_routing_simplex_property(seed, n, psi):
    moe = make_moe()
    z, h, psit, x = make_inputs(seed, n, moe.cfg, psi=psi)
    with tz.no_grad():
        out = moe(z, h, x, psit)
    w = out.w.data
    assert np.isfinite(w).all()
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-5)


def test_temperature_is_abs_base_plus_half_stress():
    moe = make_moe()
    for psi in (0.0, 0.4, 1.0):
        z, h, psit, x = make_inputs(2, 4, moe.cfg, psi=psi)
        out = moe(z, h, x, psit)
        assert out.tau.data.reshape(()) == pytest.approx(1.0 + 0.5 * psi,
                                                         abs=1e-6)
    assert BETA_STRESS == 0.5
    # negative base parameter still yields a positive temperature
    with tz.no_grad():
        moe.store["moe.tau_base"].data[:] = -2.0
    z, h, psit, x = make_inputs(2, 4, moe.cfg, psi=1.0)
    out = moe(z, h, x, psit)
    assert out.tau.data.reshape(()) == pytest.approx(2.5, abs=1e-6)


def test_weights_are_softmax_of_temperature_scaled_logits():
    # oracle: recompute w from the exported logits and temperature
    moe = make_moe()
    z, h, psi, x = make_inputs(5, 6, moe.cfg, psi=0.8)
    out = moe(z, h, x, psi)
    tau = float(out.tau.data.reshape(()))
    assert tau == pytest.approx(1.4, abs=1e-6)
    np.testing.assert_allclose(
        out.w.data, np_softmax(out.logits.data / tau), rtol=1e-5, atol=1e-6)


def test_narrative_temperature_multiplies_instead_of_dividing():
    moe = make_moe(temperature_mode="narrative")
    z, h, psi, x = make_inputs(5, 6, moe.cfg, psi=0.8)
    out = moe(z, h, x, psi)
    tau = float(out.tau.data.reshape(()))
    np.testing.assert_allclose(
        out.w.data, np_softmax(out.logits.data * tau), rtol=1e-5, atol=1e-6)
    # higher temperature sharpens instead of flattening in this mode
    ent_hi = -(out.w.data * np.log(out.w.data + 1e-12)).sum(axis=1).mean()
    z, h, psi0, x = make_inputs(5, 6, moe.cfg, psi=0.0)
    out0 = moe(z, h, x, psi0)
    ent_lo = -(out0.w.data * np.log(out0.w.data + 1e-12)).sum(axis=1).mean()
    assert ent_hi < ent_lo


def test_higher_stress_flattens_routing_in_formula_mode():
    moe = make_moe()
    z, h, _, x = make_inputs(6, 6, moe.cfg)
    ent = []
    for psi in (0.0, 1.0):
        out = moe(z, h, x, tz.tensor(np.array(psi)))
        ent.append(-(out.w.data * np.log(out.w.data + 1e-12)).sum(1).mean())
    assert ent[1] > ent[0]


def test_uniform_logit_shift_leaves_weights_unchanged():
    moe = make_moe()
    z, h, psi, x = make_inputs(7, 5, moe.cfg)
    w0 = moe(z, h, x, psi).w.data.copy()
    with tz.no_grad():
        moe.store["moe.b_div"].data += 3.7  # same shift in every column
    w1 = moe(z, h, x, psi).w.data
    np.testing.assert_allclose(w1, w0, rtol=1e-4, atol=1e-5)


def test_diversity_bias_initialization():
    assert np.allclose(make_moe().store["moe.b_div"].data,
                       [0.0, 0.5, 0.3, 0.2])
    assert np.allclose(make_moe(expert_count=2).store["moe.b_div"].data, 0.0)


# ---------------------------------------------------------- routing modes


def test_top2_routing_keeps_two_largest_and_renormalizes():
    moe = make_moe()
    z, h, psi, x = make_inputs(8, 6, moe.cfg)
    soft = moe(z, h, x, psi).w.data.copy()
    moe.cfg = dataclasses.replace(moe.cfg, routing="top2")
    w2 = moe(z, h, x, psi).w.data
    assert ((w2 > 0).sum(axis=1) == 2).all()
    np.testing.assert_allclose(w2.sum(axis=1), 1.0, atol=1e-5)
    for i in range(soft.shape[0]):
        keep = np.argsort(soft[i])[-2:]
        want = np.zeros(4)
        want[keep] = soft[i, keep] / soft[i, keep].sum()
        np.testing.assert_allclose(w2[i], want, rtol=1e-5, atol=1e-6)


def test_hard_routing_is_one_hot_argmax():
    moe = make_moe()
    z, h, psi, x = make_inputs(9, 6, moe.cfg)
    soft = moe(z, h, x, psi).w.data.copy()
    moe.cfg = dataclasses.replace(moe.cfg, routing="hard")
    w1 = moe(z, h, x, psi).w.data
    assert ((w1 > 0).sum(axis=1) == 1).all()
    np.testing.assert_allclose(w1.max(axis=1), 1.0, atol=1e-6)
    assert (w1.argmax(axis=1) == soft.argmax(axis=1)).all()


def test_single_expert_routing_is_identity():
    moe = make_moe(expert_count=1)
    z, h, psi, x = make_inputs(10, 5, moe.cfg)
    out = moe(z, h, x, psi)
    np.testing.assert_allclose(out.w.data, 1.0, atol=1e-6)
    np.testing.assert_allclose(out.e_moe.data, out.errors.data[:, 0],
                               rtol=1e-5)


# ---------------------------------------------------------------- experts


def test_expert_error_is_l2_norm_of_slice_residual():
    moe = make_moe()
    z, h, psi, x = make_inputs(11, 5, moe.cfg)
    for i, g in enumerate(moe.groups):
        _, recon, err = moe.expert_forward(i, z, h, x)
        want = np.linalg.norm(x.data[:, g.cols] - recon.data, axis=-1)
        np.testing.assert_allclose(err.data, want, rtol=1e-5, atol=1e-6)


def test_network_expert_reads_spatial_embedding_only():
    moe = make_moe()
    z, h, psi, x = make_inputs(12, 5, moe.cfg)
    base = moe(z, h, x, psi).errors.data.copy()
    z2 = tz.tensor(z.data + 0.5)
    errs_z = moe(z2, h, x, psi).errors.data
    h2 = tz.tensor(h.data + 0.5)
    errs_h = moe(z, h2, x, psi).errors.data
    spat_idx = [i for i, g in enumerate(moe.groups) if g.use_spat]
    assert spat_idx == [2]
    # perturbing z changes every expert except the spatial one
    np.testing.assert_allclose(errs_z[:, 2], base[:, 2], atol=1e-6)
    for i in (0, 1, 3):
        assert np.abs(errs_z[:, i] - base[:, i]).max() > 1e-4
    # perturbing the spatial embedding touches only that expert
    np.testing.assert_allclose(errs_h[:, [0, 1, 3]], base[:, [0, 1, 3]],
                               atol=1e-6)
    assert np.abs(errs_h[:, 2] - base[:, 2]).max() > 1e-4


def test_mixture_error_is_weighted_sum_and_convex():
    moe = make_moe()
    z, h, psi, x = make_inputs(13, 7, moe.cfg)
    out = moe(z, h, x, psi)
    want = (out.w.data * out.errors.data).sum(axis=1)
    np.testing.assert_allclose(out.e_moe.data, want, rtol=1e-5, atol=1e-6)
    assert (out.e_moe.data <= out.errors.data.max(axis=1) + 1e-5).all()
    assert (out.e_moe.data >= out.errors.data.min(axis=1) - 1e-5).all()


def test_mixture_latent_is_weighted_expert_latents():
    moe = make_moe()
    z, h, psi, x = make_inputs(14, 5, moe.cfg)
    out = moe(z, h, x, psi)
    assert out.latent.shape == (5, moe.cfg.latent_dim)
    want = np.zeros((5, moe.cfg.latent_dim), dtype=np.float64)
    for i in range(4):
        lat, _, _ = moe.expert_forward(i, z, h, x)
        want += out.w.data[:, i:i + 1] * lat.data
    np.testing.assert_allclose(out.latent.data, want, rtol=1e-4, atol=1e-5)


def test_gradients_reach_gate_temperature_and_experts():
    moe = make_moe()
    z, h, psi, x = make_inputs(15, 5, moe.cfg)
    out = moe(z, h, x, psi)
    tz.backward(tz.tsum(out.e_moe))
    for name in ("moe.b_div", "moe.tau_base", "moe.gate.l0.w",
                 "moe.exp0.enc.l0.w", "moe.exp2.dec.l0.w"):
        g = moe.store[name].grad
        assert g is not None and np.abs(g).max() > 0, name
