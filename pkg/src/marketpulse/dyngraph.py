"""Stage 2: market stress, multi-source graph learning, sparsification,
stress-modulated fusion with the prior graph, and GAT refinement.

The learned graph blends cosine similarity of embeddings, cosine similarity
of context vectors, and a pairwise edge scorer, then keeps the top-k entries
per row through a soft mask whose threshold is treated as a constant, so
gradients flow through retained weights but not through the cut point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .layers import Linear, init_weight
from .optim import ParamStore
from .schema import FEATURE_NAMES
from .tensor import Tensor

__all__ = ["StressIndicators", "DynamicGraph", "StressModel", "stress_indicators"]

_COS_TINY = 1e-12

_IDX_CVAR = FEATURE_NAMES.index("cvar_95")
_IDX_UPVOL = FEATURE_NAMES.index("upside_volatility")
_IDX_Z = FEATURE_NAMES.index("extreme_return_z")
_IDX_MKT_CORR = FEATURE_NAMES.index("market_correlation")
_IDX_SPREAD = FEATURE_NAMES.index("bid_ask_spread")


@dataclass
class StressIndicators:
    raw: np.ndarray         # (4,) volatility, extreme ratio, correlation, liquidity
    normalized: np.ndarray  # (4,) clamped to [0, 1] against training bounds


def stress_indicators(window_values: np.ndarray) -> np.ndarray:
    """Four market-wide indicators from the raw (pre-normalization) window.

    Uses the final day of the window: dispersion level (mean of tail-loss and
    upside-dispersion features), share of stocks with |return z| > 2, mean
    market-correlation feature, and mean bid-ask spread.
    """
    last = window_values[:, -1, :]
    vol = 0.5 * float(np.mean(last[:, _IDX_CVAR] + last[:, _IDX_UPVOL]))
    extreme = float(np.mean(np.abs(last[:, _IDX_Z]) > 2.0))
    corr = float(np.mean(last[:, _IDX_MKT_CORR]))
    liq = float(np.mean(last[:, _IDX_SPREAD]))
    return np.array([vol, extreme, corr, liq], dtype=np.float64)


class StressModel:
    """psi_t = sigmoid(sum_k beta_k * normalized indicator_k)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator):
        self.beta = store.register("stress.beta", np.ones(4))
        self.lo: np.ndarray | None = None
        self.hi: np.ndarray | None = None

    def fit_bounds(self, indicator_rows: np.ndarray) -> None:
        """Freeze per-indicator min/max from the training split."""
        rows = np.asarray(indicator_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != 4 or rows.shape[0] == 0:
            raise ValueError("expected a non-empty (n_windows, 4) indicator array")
        self.lo = rows.min(axis=0)
        self.hi = rows.max(axis=0)

    def set_bounds(self, lo: np.ndarray, hi: np.ndarray) -> None:
        self.lo = np.asarray(lo, dtype=np.float64).copy()
        self.hi = np.asarray(hi, dtype=np.float64).copy()

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        if self.lo is None or self.hi is None:
            raise RuntimeError("stress bounds not fitted; call fit_bounds first")
        span = np.maximum(self.hi - self.lo, 1e-12)
        return np.clip((raw - self.lo) / span, 0.0, 1.0)

    def __call__(self, window_values: np.ndarray) -> tuple[Tensor, StressIndicators]:
        raw = stress_indicators(window_values)
        norm = self.normalize(raw)
        psi = tz.sigmoid(tz.tsum(tz.mul(self.beta, tz.constant(norm))))
        return psi, StressIndicators(raw=raw, normalized=norm)


def _cosine_matrix(x: Tensor, what: str) -> Tensor:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms < _COS_TINY):
        warnings.warn(f"zero-norm {what} embedding; cosine similarity set to 0",
                      RuntimeWarning, stacklevel=3)
    n = tz.clamp(tz.l2norm(x, axis=-1, keepdims=True), lo=_COS_TINY)
    unit = tz.div(x, n)
    return tz.matmul(unit, tz.transpose(unit))


@dataclass
class GraphState:
    a_fused: Tensor
    a_learned: Tensor
    alpha: Tensor | float
    support: np.ndarray  # boolean (N, N) hard retained support per row


class DynamicGraph:
    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.hidden_dim
        self.cfg = cfg
        edge_in = 4 * d + 2 * cfg.context_dim
        # first edge-MLP layer split into source/destination halves so the
        # pairwise pass is two small matmuls plus a broadcast add
        self.edge_w_src = store.register(
            "graph.edge.w_src", init_weight(rng, edge_in, (2 * d + cfg.context_dim, d)))
        self.edge_w_dst = store.register(
            "graph.edge.w_dst", init_weight(rng, edge_in, (2 * d + cfg.context_dim, d)))
        self.edge_b = store.register("graph.edge.b", np.zeros(d))
        self.edge_out = Linear(store, "graph.edge.out", rng, d, cfg.context_dim)
        self.source_logits = store.register("graph.source_logits", np.zeros(3))
        self.alpha_base = store.register("graph.alpha_base", np.array([0.5]))
        self.alpha_beta = store.register("graph.alpha_beta", np.array([-0.5]))
        heads, hd = cfg.heads, cfg.hidden_dim // cfg.heads
        self.gat_w = store.register("graph.gat.w", init_weight(rng, 2 * d, (heads, 2 * d, hd)))
        self.gat_a_src = store.register("graph.gat.a_src", init_weight(rng, hd, (heads, hd)))
        self.gat_a_dst = store.register("graph.gat.a_dst", init_weight(rng, hd, (heads, hd)))
        self.gat_out = Linear(store, "graph.gat.out", rng, heads * hd, d)

    # ----- sources -------------------------------------------------------

    def edge_scores(self, z: Tensor, c: Tensor) -> Tensor:
        """A_edge[i, j] = cos(mlp([z_i;z_j;c_i;c_j]), mlp([z_j;z_i;c_j;c_i]))."""
        n = z.shape[0]
        zc = tz.concat([z, c], axis=-1)
        u = tz.matmul(zc, self.edge_w_src)
        v = tz.add(tz.matmul(zc, self.edge_w_dst), self.edge_b)
        d = u.shape[-1]
        pair = tz.relu(tz.add(tz.reshape(u, (n, 1, d)), tz.reshape(v, (1, n, d))))
        out = self.edge_out(pair)
        out_t = tz.transpose(out, (1, 0, 2))
        nu = tz.clamp(tz.l2norm(out, axis=-1, keepdims=True), lo=_COS_TINY)
        nv = tz.clamp(tz.l2norm(out_t, axis=-1, keepdims=True), lo=_COS_TINY)
        return tz.tsum(tz.mul(tz.div(out, nu), tz.div(out_t, nv)), axis=-1)

    def source_graphs(self, z: Tensor, c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        a_temp = _cosine_matrix(z, "embedding")
        a_ctx = _cosine_matrix(c, "context")
        a_edge = self.edge_scores(z, c)
        return a_temp, a_ctx, a_edge

    def interpolate_and_refine(self, z: Tensor, c: Tensor, prior: np.ndarray) -> Tensor:
        a_temp, a_ctx, a_edge = self.source_graphs(z, c)
        w = tz.softmax(tz.sigmoid(self.source_logits), axis=-1)
        a_prior = tz.constant(prior)
        mixed = tz.add(
            tz.add(tz.mul(a_temp, w[0:1]), tz.mul(a_ctx, w[1:2])),
            tz.mul(a_prior, w[2:3]))
        return tz.add(
            tz.add(tz.mul(mixed, tz.sigmoid(a_edge)), tz.mul(a_edge, 0.1)),
            tz.mul(a_prior, 0.05))

    # ----- sparsification and fusion -------------------------------------

    def topk_sparsify(self, a: Tensor) -> tuple[Tensor, np.ndarray]:
        n = a.shape[0]
        k = self.cfg.top_k
        if k >= n:
            raise ValueError(f"top_k={k} must be < number of stocks {n}")
        # cut point per row, treated as a constant (no gradient path)
        tau = np.partition(a.data, n - k, axis=-1)[:, n - k][:, None]
        mask = tz.sigmoid(tz.mul(tz.sub(a, tz.constant(tau)), 5.0))
        kept = tz.mul(a, mask)
        sym = tz.mul(tz.add(kept, tz.transpose(kept)), 0.5)
        support = mask.data >= 0.5
        neg = np.where(support, 0.0, -1e9)
        return tz.softmax(tz.add(sym, tz.constant(neg)), axis=-1), support

    def fuse(self, a_learned: Tensor, prior: np.ndarray, psi: Tensor):
        mode = self.cfg.alpha_mode
        if mode == "fixed":
            alpha = self.cfg.alpha_fixed
            fused = tz.add(tz.mul(tz.constant(prior), alpha),
                           tz.mul(a_learned, 1.0 - alpha))
            return fused, alpha
        if mode == "learned":
            pre = self.alpha_base
        else:
            pre = tz.add(self.alpha_base, tz.mul(self.alpha_beta, psi))
        alpha = tz.clamp(tz.sigmoid(pre), lo=0.2, hi=0.8)
        one_minus = tz.sub(1.0, alpha)
        fused = tz.add(tz.mul(tz.constant(prior), alpha), tz.mul(a_learned, one_minus))
        return fused, alpha

    # ----- GAT refinement -------------------------------------------------

    def gat_refine(self, z: Tensor, a_fused: Tensor) -> Tensor:
        n = z.shape[0]
        support = a_fused.data > 0.0
        empty = np.flatnonzero(~support.any(axis=1))
        if empty.size:
            support = support.copy()
            support[empty, empty] = True
        neg = np.where(support, 0.0, -1e9)

        h = tz.matmul(tz.reshape(z, (1, n, 2 * self.cfg.hidden_dim)), self.gat_w)
        src = tz.tsum(tz.mul(h, tz.reshape(self.gat_a_src, (self.cfg.heads, 1, -1))),
                      axis=-1, keepdims=True)
        dst = tz.tsum(tz.mul(h, tz.reshape(self.gat_a_dst, (self.cfg.heads, 1, -1))),
                      axis=-1, keepdims=True)
        scores = tz.leaky_relu(
            tz.add(src, tz.transpose(dst, (0, 2, 1))), slope=0.2)
        attn = tz.softmax(tz.add(scores, tz.constant(neg[None, :, :])), axis=-1)
        ctx = tz.matmul(attn, h)
        merged = tz.reshape(tz.transpose(ctx, (1, 0, 2)), (n, -1))
        return self.gat_out(merged)

    def __call__(self, z: Tensor, c: Tensor, prior: np.ndarray,
                 psi: Tensor) -> tuple[GraphState, Tensor]:
        if self.cfg.multi_source:
            a_pre = self.interpolate_and_refine(z, c, prior)
        else:
            a_pre = _cosine_matrix(z, "embedding")
        a_learned, support = self.topk_sparsify(a_pre)
        a_fused, alpha = self.fuse(a_learned, prior, psi)
        z_ref = self.gat_refine(z, a_fused)
        pad = tz.concat(
            [z_ref, tz.zeros((z.shape[0], self.cfg.hidden_dim))], axis=-1)
        z_final = tz.add(z, tz.mul(pad, 0.5))
        return GraphState(a_fused=a_fused, a_learned=a_learned, alpha=alpha,
                          support=support), z_final
