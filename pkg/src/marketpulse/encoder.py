"""Stage 1: temporal encoding, prior-graph spatial encoding, cross-modal fusion.

Produces, per window, the joint embedding z (temporal + spatial halves), the
compressed context vector c, and the spatial embedding consumed by the
network-structure expert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .layers import MLP, BiLSTM, Linear, MultiHeadSelfAttention, init_weight
from .optim import ParamStore
from .tensor import Tensor

__all__ = ["Encoder", "EncoderOutput", "normalize_window", "gcn_adjacency"]

NORM_EPS = 1e-8


@dataclass
class EncoderOutput:
    z: Tensor        # (N, 2d) = [h_temp; h_spat]
    c: Tensor        # (N, context_dim), tanh range
    h_spat: Tensor   # (N, d)
    h_fused: Tensor  # (N, d)
    h_temp: Tensor   # (N, d)
    x_norm: Tensor   # (N, T, F) normalized window


def normalize_window(values) -> Tensor:
    """Per (stock, day) normalization across the feature axis."""
    x = values if isinstance(values, Tensor) else tz.constant(values)
    return tz.layer_norm(x, axis=-1, eps=NORM_EPS)


def gcn_adjacency(prior_adjacency: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops: D^-1/2 (A+I) D^-1/2."""
    a = prior_adjacency.astype(np.float64) + np.eye(prior_adjacency.shape[0])
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return (a * inv_sqrt[:, None] * inv_sqrt[None, :])


class Encoder:
    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: ModelConfig):
        d = cfg.hidden_dim
        f = cfg.n_features
        self.cfg = cfg
        self.bilstm = BiLSTM(store, "enc.bilstm", rng, f, d)
        self.temporal_attn = MultiHeadSelfAttention(
            store, "enc.tattn", rng, dim=2 * d, heads=cfg.heads,
            head_dim=2 * d // cfg.heads, out_dim=2 * d)
        self.pool = MLP(store, "enc.pool", rng, [4 * d, 2 * d, d])
        self.in_proj = Linear(store, "enc.inproj", rng, f, d)
        self.gcn_w = [
            store.register(f"enc.gcn{i}.w", init_weight(rng, d, (d, d)))
            for i in range(cfg.gcn_layers)
        ]
        self.xq = Linear(store, "enc.xmodal.q", rng, d, d)
        self.xk = Linear(store, "enc.xmodal.k", rng, d, d)
        self.xv = Linear(store, "enc.xmodal.v", rng, d, d)
        self.xo = Linear(store, "enc.xmodal.o", rng, d, d)
        self.w_ctx = Linear(store, "enc.ctx", rng, d, cfg.context_dim, bias=False)

    def temporal_encode(self, x_norm: Tensor) -> Tensor:
        n, t, _ = x_norm.shape
        if t < 2:
            raise ValueError(f"temporal encoding needs T >= 2, got {t}")
        h_bi = self.bilstm(x_norm)
        h_attn = self.temporal_attn(h_bi)
        pooled = tz.concat([tz.tmean(h_attn, axis=1), h_attn[:, t - 1, :]], axis=-1)
        return self.pool(pooled)

    def spatial_encode(self, x_last: Tensor, adj_norm: np.ndarray) -> Tensor:
        h0 = self.in_proj(x_last)
        a = tz.constant(adj_norm)
        h = h0
        for w in self.gcn_w:
            h = tz.relu(tz.matmul(tz.matmul(a, h), w))
        return tz.add(h, tz.mul(h0, 0.5))

    def cross_modal_fuse(self, h_temp: Tensor, h_spat: Tensor) -> tuple[Tensor, Tensor]:
        if self.cfg.cross_modal:
            d = self.cfg.hidden_dim
            q = self.xq(h_temp)
            k = self.xk(h_spat)
            v = self.xv(h_spat)
            scores = tz.mul(tz.matmul(q, tz.transpose(k)), 1.0 / np.sqrt(d))
            attn = tz.softmax(scores, axis=-1)
            h_fused = tz.add(h_temp, self.xo(tz.matmul(attn, v)))
        else:
            h_fused = h_temp
        c = tz.tanh(self.w_ctx(h_fused))
        return h_fused, c

    def __call__(self, window_values: np.ndarray, adj_norm: np.ndarray) -> EncoderOutput:
        x_norm = normalize_window(window_values)
        t = x_norm.shape[1]
        h_temp = self.temporal_encode(x_norm)
        h_spat = self.spatial_encode(x_norm[:, t - 1, :], adj_norm)
        h_fused, c = self.cross_modal_fuse(h_temp, h_spat)
        z = tz.concat([h_temp, h_spat], axis=-1)
        return EncoderOutput(z=z, c=c, h_spat=h_spat, h_fused=h_fused,
                             h_temp=h_temp, x_norm=x_norm)
