"""Parameterized building blocks: linear/MLP, BiLSTM, GRU, attention.

Every block registers its parameters in a shared ParamStore under a dotted
prefix at construction time, drawing inits from one generator in a fixed
order so a given seed always produces the same parameter vector. Weights use
uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases start at zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .optim import ParamStore
from .tensor import Tensor

__all__ = ["init_weight", "Linear", "MLP", "BiLSTM", "GRUDecoder",
           "MultiHeadSelfAttention"]


def init_weight(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator,
                 in_dim: int, out_dim: int, bias: bool = True):
        self.w = store.register(f"{prefix}.w", init_weight(rng, in_dim, (in_dim, out_dim)))
        self.b = store.register(f"{prefix}.b", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tz.matmul(x, self.w)
        if self.b is not None:
            out = tz.add(out, self.b)
        return out


class MLP:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator,
                 sizes: list[int]):
        self.layers = [
            Linear(store, f"{prefix}.l{i}", rng, sizes[i], sizes[i + 1])
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tz.relu(x)
        return x


class _LSTMDirection:
    def __init__(self, store, prefix, rng, in_dim: int, hidden: int):
        self.hidden = hidden
        self.wx = store.register(f"{prefix}.wx", init_weight(rng, in_dim, (in_dim, 4 * hidden)))
        self.wh = store.register(f"{prefix}.wh", init_weight(rng, hidden, (hidden, 4 * hidden)))
        self.b = store.register(f"{prefix}.b", np.zeros(4 * hidden))

    def run(self, x: Tensor, reverse: bool) -> list[Tensor]:
        n, t, f = x.shape
        hd = self.hidden
        # input projections for all steps in one matmul
        xp = tz.add(tz.matmul(tz.reshape(x, (n * t, f)), self.wx), self.b)
        xp = tz.reshape(xp, (n, t, 4 * hd))
        hc = tz.zeros((n, 2 * hd))
        steps = range(t - 1, -1, -1) if reverse else range(t)
        out: list[Tensor] = [None] * t
        for step in steps:
            hc = tz.lstm_cell(xp[:, step, :], hc, self.wh)
            out[step] = tz.reshape(hc[:, :hd], (n, 1, hd))
        return out


class BiLSTM:
    """Bidirectional LSTM; output concatenates both directions per step."""

    def __init__(self, store, prefix, rng, in_dim: int, hidden: int = 128):
        self.fwd = _LSTMDirection(store, f"{prefix}.fwd", rng, in_dim, hidden)
        self.bwd = _LSTMDirection(store, f"{prefix}.bwd", rng, in_dim, hidden)

    def __call__(self, x: Tensor) -> Tensor:
        hf = self.fwd.run(x, reverse=False)
        hb = self.bwd.run(x, reverse=True)
        fwd = tz.concat(hf, axis=1)
        bwd = tz.concat(hb, axis=1)
        return tz.concat([fwd, bwd], axis=-1)


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention over the second-to-last axis.

    Input (..., L, D) attends across L; output (..., L, out_dim).
    """

    def __init__(self, store, prefix, rng, dim: int, heads: int,
                 head_dim: int, out_dim: int | None = None):
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        out_dim = out_dim if out_dim is not None else dim
        self.wq = store.register(f"{prefix}.wq", init_weight(rng, dim, (dim, inner)))
        self.wk = store.register(f"{prefix}.wk", init_weight(rng, dim, (dim, inner)))
        self.wv = store.register(f"{prefix}.wv", init_weight(rng, dim, (dim, inner)))
        self.wo = store.register(f"{prefix}.wo", init_weight(rng, inner, (inner, out_dim)))

    def __call__(self, x: Tensor, return_attn: bool = False):
        *lead, length, dim = x.shape
        h, hd = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            t = tz.reshape(t, (*lead, length, h, hd))
            axes = list(range(t.ndim))
            axes[-3], axes[-2] = axes[-2], axes[-3]
            return tz.transpose(t, axes)

        q = split(tz.matmul(x, self.wq))
        k = split(tz.matmul(x, self.wk))
        v = split(tz.matmul(x, self.wv))
        scores = tz.mul(tz.matmul(q, tz.transpose(k)), 1.0 / np.sqrt(hd))
        attn = tz.softmax(scores, axis=-1)
        ctx = tz.matmul(attn, v)
        axes = list(range(ctx.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        ctx = tz.reshape(tz.transpose(ctx, axes), (*lead, length, h * hd))
        out = tz.matmul(ctx, self.wo)
        if return_attn:
            return out, attn
        return out


class GRUDecoder:
    """GRU that rolls out ``horizon`` feature vectors from a latent code.

    The latent projects to the initial hidden state; each step consumes the
    previous step's own prediction (zeros at the first step).
    """

    def __init__(self, store, prefix, rng, latent_dim: int, feat_dim: int,
                 horizon: int, hidden: int = 128):
        self.horizon = horizon
        self.hidden = hidden
        self.feat_dim = feat_dim
        self.init = Linear(store, f"{prefix}.init", rng, latent_dim, hidden)
        self.wx = store.register(f"{prefix}.wx", init_weight(rng, feat_dim, (feat_dim, 3 * hidden)))
        self.wh = store.register(f"{prefix}.wh", init_weight(rng, hidden, (hidden, 3 * hidden)))
        self.b = store.register(f"{prefix}.b", np.zeros(3 * hidden))
        self.head = Linear(store, f"{prefix}.head", rng, hidden, feat_dim)

    def __call__(self, latent: Tensor) -> Tensor:
        """latent (N, latent_dim) -> predictions (N, horizon, feat_dim)."""
        n = latent.shape[0]
        h = tz.tanh(self.init(latent))
        x = tz.zeros((n, self.feat_dim))
        outs = []
        for _ in range(self.horizon):
            px = tz.add(tz.matmul(x, self.wx), self.b)
            h = tz.gru_cell(px, h, self.wh)
            x = self.head(h)
            outs.append(tz.reshape(x, (n, 1, self.feat_dim)))
        return tz.concat(outs, axis=1)
