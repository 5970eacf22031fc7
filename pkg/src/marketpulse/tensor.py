"""Dense tensors with tape-based reverse-mode differentiation.

Everything runs on numpy arrays (float32 by default, float64 available for
verification work). Forward ops append a record to the active tape whenever
gradients are enabled and an input requires them; ``backward`` walks the tape
in reverse. Reductions use numpy's deterministic ordering, so repeated runs
with the same inputs are bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NumericsError",
    "tensor",
    "constant",
    "zeros",
    "ones",
    "backward",
    "no_grad",
    "grad_enabled",
    "finite_checks",
    "get_default_dtype",
    "set_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "broadcast_to",
    "lstm_cell",
    "gru_cell",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clamp",
    "softmax",
    "tsum",
    "tmean",
    "tstd",
    "l2norm",
    "layer_norm",
    "cosine",
]

_DEFAULT_DTYPE = np.float32

# Backward-pass floor used where an exact-zero denominator would otherwise
# produce inf (sqrt'(0), L2-norm at the origin).
_TINY = 1e-12

FINITE_CHECKS = True


class NumericsError(ValueError):
    """A forward op produced NaN/Inf, or shapes were incompatible."""


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Grad-blocking copy; downstream ops see a fresh leaf."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)


class Tape:
    """Ordered record of forward ops for one reverse traversal.

    Ops are appended in execution order, so iterating the list backwards
    visits every op after all of its consumers.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _ACTIVE_TAPE


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Override per-op NaN/Inf validation inside the block.

    Hot loops that validate their own scalar outputs (e.g. the training loss
    each step) can switch the per-op sweeps off and keep the same safety net.
    """
    global FINITE_CHECKS
    prev = FINITE_CHECKS
    FINITE_CHECKS = enabled
    try:
        yield
    finally:
        FINITE_CHECKS = prev


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not FINITE_CHECKS:
        return
    # sum in float64: any NaN/Inf in arr makes the reduced value non-finite
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NumericsError(f"op '{name}' produced non-finite values")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _make(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(name, out_data)
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = req
    out.grad = None
    if req:
        _ACTIVE_TAPE.records.append((out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None, clear: bool = True) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be a scalar. Gradients accumulate (+=) into existing
    buffers, so call ``zero_grad`` on parameters between optimization steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    t = tape if tape is not None else _ACTIVE_TAPE
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(t.records):
            if out.grad is not None:
                fn(out.grad)
    if clear:
        # intermediate grads are not part of the contract; drop them so a
        # second forward/backward starts clean
        for out, _ in t.records:
            if out is not loss:
                out.grad = None
        t.clear()


def clear_tape() -> None:
    _ACTIVE_TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make("neg", -a.data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError(
            f"matmul expects >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # fold leading axes into one GEMM instead of a loop of small ones
        k, m = b.shape
        a2 = np.ascontiguousarray(a.data).reshape(-1, k)
        out = (a2 @ b.data).reshape(*a.shape[:-1], m)

        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(-1, m)
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a2.T @ g2)

        return _make("matmul", out, (a, b), bwd)

    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast_matmul(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast_matmul(gb, b.shape))

    return _make("matmul", out, (a, b), bwd)


def _unbroadcast_matmul(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(old))

    return _make("reshape", out, (a,), bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bwd(g):
        _accumulate(a, np.transpose(g, inv))

    return _make("transpose", out, (a,), bwd)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(ts, parts):
            _accumulate(t, p)

    return _make("concat", out, ts, bwd)


def _slice(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=a.data.dtype)
    else:
        out = np.ascontiguousarray(out)

    def bwd(g):
        # basic (non-repeating) indexing only, so in-place += is exact and
        # avoids materializing a full-size scatter buffer per slice
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return _make("slice", out, (a,), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _make("broadcast_to", out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # stable for both signs: exp always sees a non-positive argument
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_data(a.data)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make("sigmoid", out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out * out))

    return _make("tanh", out, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _make("relu", out, (a,), bwd)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.data > 0, a.data, slope * a.data)

    def bwd(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope).astype(g.dtype))

    return _make("leaky_relu", out, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)

    return _make("exp", out, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _make("log", out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        # floor avoids inf at exactly zero (constant rows in layer_norm)
        _accumulate(a, g / (2.0 * np.maximum(out, _TINY)))

    return _make("sqrt", out, (a,), bwd)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.data)

    def bwd(g):
        _accumulate(a, g * np.sign(a.data))

    return _make("abs", out, (a,), bwd)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        _accumulate(a, g * mask)

    return _make("clamp", out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and composites


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make("sum", out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.data.dtype)
    out = np.asarray(out, dtype=a.data.dtype)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make("mean", out, (a,), bwd)


def tstd(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (composed from primitives)."""
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=keepdims)
    return sqrt(var)


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` with a zero-safe backward."""
    a = _as_tensor(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    out = norm if keepdims else np.squeeze(norm, axis=axis)
    out = np.asarray(out, dtype=a.data.dtype)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * a.data / np.maximum(norm, _TINY))

    return _make("l2norm", out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make("softmax", out, (a,), bwd)


def layer_norm(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """(x - mean) / (std + eps) along ``axis``; no affine parameters."""
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    sig = sqrt(var)
    return div(centered, add(sig, eps))


def cosine(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; zero vectors yield similarity 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    na = clamp(l2norm(a, axis=axis, keepdims=True), lo=_TINY)
    nb = clamp(l2norm(b, axis=axis, keepdims=True), lo=_TINY)
    return tsum(mul(div(a, na), div(b, nb)), axis=axis)


# ---------------------------------------------------------------------------
# fused recurrent cells (one tape record per step instead of a dozen)


def lstm_cell(px, hc_prev, wh) -> Tensor:
    """One LSTM step with gates fused into a single op.

    ``px`` (N, 4H) is the precomputed input projection (bias included),
    ``hc_prev`` (N, 2H) packs [h_prev | c_prev], ``wh`` is (H, 4H) with gate
    order [input, forget, cell, output]. Returns packed [h | c] (N, 2H).
    """
    px, hc_prev, wh = _as_tensor(px), _as_tensor(hc_prev), _as_tensor(wh)
    hd = wh.shape[0]
    h_prev = hc_prev.data[:, :hd]
    c_prev = hc_prev.data[:, hd:]
    z = px.data + h_prev @ wh.data
    i = _sigmoid_data(z[:, :hd])
    f = _sigmoid_data(z[:, hd:2 * hd])
    gt = np.tanh(z[:, 2 * hd:3 * hd])
    o = _sigmoid_data(z[:, 3 * hd:])
    c = f * c_prev + i * gt
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=1)

    def bwd(g):
        gh = g[:, :hd]
        gc = g[:, hd:] + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * gt * i * (1.0 - i),
            gc * c_prev * f * (1.0 - f),
            gc * i * (1.0 - gt * gt),
            gh * tc * o * (1.0 - o),
        ], axis=1)
        _accumulate(px, dz)
        if wh.requires_grad:
            _accumulate(wh, h_prev.T @ dz)
        if hc_prev.requires_grad:
            _accumulate(hc_prev,
                        np.concatenate([dz @ wh.data.T, gc * f], axis=1))

    return _make("lstm_cell", out, (px, hc_prev, wh), bwd)


def gru_cell(px, h_prev, wh) -> Tensor:
    """One GRU step with gates fused into a single op.

    ``px`` (N, 3H) is the precomputed input projection (bias included),
    ``h_prev`` (N, H), ``wh`` (H, 3H) with gate order [reset, update,
    candidate]; the reset gate scales the hidden contribution of the
    candidate. Returns the next hidden state (N, H).
    """
    px, h_prev, wh = _as_tensor(px), _as_tensor(h_prev), _as_tensor(wh)
    hd = wh.shape[0]
    zh = h_prev.data @ wh.data
    r = _sigmoid_data(px.data[:, :hd] + zh[:, :hd])
    u = _sigmoid_data(px.data[:, hd:2 * hd] + zh[:, hd:2 * hd])
    zh_n = zh[:, 2 * hd:]
    cand = np.tanh(px.data[:, 2 * hd:] + r * zh_n)
    out = u * h_prev.data + (1.0 - u) * cand

    def bwd(g):
        du = g * (h_prev.data - cand) * u * (1.0 - u)
        dcand = g * (1.0 - u) * (1.0 - cand * cand)
        dr = dcand * zh_n * r * (1.0 - r)
        dpx = np.concatenate([dr, du, dcand], axis=1)
        _accumulate(px, dpx)
        dzh = np.concatenate([dr, du, dcand * r], axis=1)
        if wh.requires_grad:
            _accumulate(wh, h_prev.data.T @ dzh)
        if h_prev.requires_grad:
            _accumulate(h_prev, g * u + dzh @ wh.data.T)

    return _make("gru_cell", out, (px, h_prev, wh), bwd)
