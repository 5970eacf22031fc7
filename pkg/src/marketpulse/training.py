"""Optimization loop: combined loss, early stopping, checkpoints.

One optimizer step consumes one day-window: the forward pass always sees the
full cross-section (graph ops need every stock), while the loss averages over
a sampled subset of stocks. Routing weights from the previous window index
feed the smoothness term as constants.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig, TrainConfig, config_hash, model_config_from_dict
from .data import Panel, PriorGraph
from .dyngraph import stress_indicators
from .encoder import gcn_adjacency
from .model import MarketModel, ModelOutput
from .optim import Adam
from .scoring import Thresholds, calibrate_thresholds, market_pressure_index
from .tensor import Tensor

__all__ = [
    "TrainingError", "LossBreakdown", "EpochStats", "TrainResult",
    "window_loss", "clip_gradients", "train_model", "write_loss_curve",
    "save_checkpoint", "load_checkpoint",
]

CKPT_MAGIC = b"MPCKPT01"
CKPT_VERSION = 1

_LOG_FLOOR = 1e-12  # entropy log floor; exact-zero weights contribute zero


class TrainingError(RuntimeError):
    """Training aborted: divergence, missing splits, or bad checkpoint."""


@dataclass
class LossBreakdown:
    l_rec: float
    l_div: float
    l_smooth: float
    total: float


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    l_rec: float
    l_div: float
    l_smooth: float


@dataclass
class TrainResult:
    model: MarketModel
    thresholds: Thresholds
    history: list[EpochStats]
    best_epoch: int
    stopped_epoch: int


def _entropy(w: Tensor, idx: np.ndarray) -> Tensor:
    wb = w[idx]
    logw = tz.log(tz.clamp(wb, lo=_LOG_FLOOR))
    return tz.tmean(tz.neg(tz.tsum(tz.mul(wb, logw), axis=-1)))


def window_loss(out: ModelOutput, batch_idx: np.ndarray,
                prev_w: np.ndarray | None, tcfg: TrainConfig,
                ) -> tuple[Tensor, LossBreakdown]:
    """Combined loss over the sampled stocks of one window."""
    per_stock = tz.tsum(out.moe.errors, axis=-1)
    for err in out.horizon_errors:
        per_stock = tz.add(per_stock, err)
    l_rec = tz.tmean(per_stock[batch_idx])
    total = l_rec

    entropy = _entropy(out.moe.w, batch_idx)
    sign = -1.0 if tcfg.diversity_sign == "reward" else 1.0
    l_div = tz.mul(entropy, sign)
    if tcfg.gamma1 != 0.0:
        total = tz.add(total, tz.mul(l_div, tcfg.gamma1))

    if prev_w is not None:
        diff = tz.sub(out.moe.w[batch_idx], prev_w[batch_idx])
        l_smooth = tz.tmean(tz.tsum(tz.mul(diff, diff), axis=-1))
        if tcfg.gamma2 != 0.0:
            total = tz.add(total, tz.mul(l_smooth, tcfg.gamma2))
        l_smooth_val = l_smooth.item()
    else:
        l_smooth_val = 0.0

    return total, LossBreakdown(l_rec=l_rec.item(), l_div=l_div.item(),
                                l_smooth=l_smooth_val, total=total.item())


def _fit_stress_bounds(model: MarketModel, panel: Panel) -> None:
    t = model.cfg.window
    rows = [stress_indicators(panel.window(i, t).values)
            for i in range(panel.n_windows(t))]
    model.stress.fit_bounds(np.stack(rows))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. A ``max_norm`` of 0 disables clipping.
    """
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def _val_loss(model: MarketModel, panel: Panel, prior: np.ndarray,
              adj: np.ndarray, tcfg: TrainConfig) -> float:
    t = model.cfg.window
    all_idx = np.arange(panel.n_stocks)
    prev: np.ndarray | None = None
    losses = []
    with tz.no_grad():
        for i in range(panel.n_windows(t)):
            out = model.forward(panel.window(i, t).values, prior, adj)
            _, parts = window_loss(out, all_idx, prev, tcfg)
            losses.append(parts.total)
            prev = out.moe.w.data.copy()
    return float(np.mean(losses))


def train_model(model: MarketModel, train_panel: Panel, val_panel: Panel,
                prior: PriorGraph, tcfg: TrainConfig,
                loss_curve_path=None) -> TrainResult:
    """Fit the model, early-stop on validation loss, calibrate thresholds."""
    tcfg.validate()
    cfg = model.cfg
    t = cfg.window
    n_windows = train_panel.n_windows(t)
    if n_windows < 1 or val_panel.n_windows(t) < 1:
        raise TrainingError(
            f"window {t} needs >= {t} days in both splits "
            f"(train {train_panel.n_days}, val {val_panel.n_days})")

    adj = gcn_adjacency(prior.adjacency)
    _fit_stress_bounds(model, train_panel)
    opt = Adam(model.store.values(), lr=tcfg.learning_rate)
    rng = np.random.default_rng(tcfg.seed)
    n_stocks = train_panel.n_stocks
    batch = min(tcfg.batch_size, n_stocks)

    routing_cache: dict[int, np.ndarray] = {}
    history: list[EpochStats] = []
    best_val = np.inf
    best_epoch = 0
    best_params: dict[str, np.ndarray] | None = None
    best_norm: dict | None = None
    stall = 0
    stopped_epoch = tcfg.max_epochs

    with tz.finite_checks(False):
        for epoch in range(1, tcfg.max_epochs + 1):
            totals, recs, divs, smooths = [], [], [], []
            for win_idx in rng.permutation(n_windows):
                win_idx = int(win_idx)
                batch_idx = np.sort(rng.choice(n_stocks, size=batch, replace=False))
                out = model.forward(train_panel.window(win_idx, t).values,
                                    prior.adjacency, adj)
                prev = routing_cache.get(win_idx - 1)
                loss, parts = window_loss(out, batch_idx, prev, tcfg)
                if not np.isfinite(parts.total):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, window {win_idx}")
                tz.backward(loss)
                clip_gradients(model.store.values(), tcfg.clip_norm)
                opt.step()
                model.store.zero_grad()
                routing_cache[win_idx] = out.moe.w.data.copy()
                model.scores(out, training=True)  # advance EMA score stats
                totals.append(parts.total)
                recs.append(parts.l_rec)
                divs.append(parts.l_div)
                smooths.append(parts.l_smooth)

            val = _val_loss(model, val_panel, prior.adjacency, adj, tcfg)
            history.append(EpochStats(
                epoch=epoch, train_loss=float(np.mean(totals)), val_loss=val,
                l_rec=float(np.mean(recs)), l_div=float(np.mean(divs)),
                l_smooth=float(np.mean(smooths))))

            if val < best_val:
                best_val = val
                best_epoch = epoch
                best_params = {k: v.copy()
                               for k, v in model.store.state_arrays().items()}
                best_norm = dict(model.normalizer.state())
                stall = 0
            else:
                stall += 1
                if stall >= tcfg.patience:
                    stopped_epoch = epoch
                    break

    if best_params is not None:
        model.store.load_arrays(best_params)
        model.normalizer.load_state(best_norm)

    if loss_curve_path is not None:
        write_loss_curve(history, loss_curve_path)

    thresholds = _calibrate(model, val_panel, prior.adjacency, adj)
    return TrainResult(model=model, thresholds=thresholds, history=history,
                       best_epoch=best_epoch, stopped_epoch=stopped_epoch)


def _calibrate(model: MarketModel, val_panel: Panel, prior: np.ndarray,
               adj: np.ndarray) -> Thresholds:
    """Anomaly threshold from validation scores, alert cuts from the
    validation market-index series computed with that threshold."""
    t = model.cfg.window
    n_win = val_panel.n_windows(t)
    scores = np.empty((n_win, val_panel.n_stocks))
    weights = np.empty((n_win, val_panel.n_stocks, len(model.moe.groups)))
    psis = np.empty(n_win)
    for i in range(n_win):
        out, s = model.infer(val_panel.window(i, t).values, prior, adj)
        scores[i] = s
        weights[i] = out.moe.w.data
        psis[i] = float(out.psi.data)

    def mpi_series(theta: float) -> np.ndarray:
        return np.array([
            market_pressure_index(scores[i], weights[i], psis[i], theta)
            for i in range(n_win)
        ])

    thresholds, _ = calibrate_thresholds(scores.ravel(), mpi_series)
    return thresholds


def write_loss_curve(history: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,l_rec,l_div,l_smooth\n")
        for row in history:
            fh.write(f"{row.epoch},{row.train_loss:.8g},{row.val_loss:.8g},"
                     f"{row.l_rec:.8g},{row.l_div:.8g},{row.l_smooth:.8g}\n")


# ---------------------------------------------------------------------------
# checkpoints: magic + little-endian manifest length + JSON manifest + blob


def save_checkpoint(model: MarketModel, path, thresholds: Thresholds | None = None,
                    ) -> None:
    arrays = model.store.state_arrays()
    names = sorted(arrays)
    params = []
    chunks = []
    offset = 0
    for name in names:
        raw = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        params.append({"name": name, "shape": list(arrays[name].shape),
                       "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    bounds = None
    if model.stress.lo is not None:
        bounds = {"lo": [float(x) for x in model.stress.lo],
                  "hi": [float(x) for x in model.stress.hi]}
    manifest = {
        "version": CKPT_VERSION,
        "config": asdict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "params": params,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "stress_bounds": bounds,
        "normalizer": model.normalizer.state(),
        "thresholds": thresholds.to_dict() if thresholds is not None else None,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, expect: ModelConfig | None = None,
                    ) -> tuple[MarketModel, Thresholds | None]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise TrainingError(f"{path}: not a model checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise TrainingError(f"{path}: truncated manifest")
    manifest = json.loads(raw[16:16 + mlen].decode())
    if manifest.get("version") != CKPT_VERSION:
        raise TrainingError(
            f"{path}: checkpoint version {manifest.get('version')} "
            f"!= supported {CKPT_VERSION}")
    blob = raw[16 + mlen:]
    if len(blob) != manifest["blob_bytes"]:
        raise TrainingError(f"{path}: truncated value region "
                            f"({len(blob)} of {manifest['blob_bytes']} bytes)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise TrainingError(f"{path}: value-region checksum failure")

    cfg = model_config_from_dict(manifest["config"])
    if expect is not None:
        for key, have in asdict(expect).items():
            stored = getattr(cfg, key)
            if stored != have:
                raise TrainingError(
                    f"{path}: checkpoint config incompatible: "
                    f"{key}={stored} but caller expects {key}={have}")

    model = MarketModel(cfg, seed=0)
    arrays = {}
    for entry in manifest["params"]:
        name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = flat.reshape(shape).astype(tz.get_default_dtype())
    model.store.load_arrays(arrays)

    if manifest["stress_bounds"] is not None:
        model.stress.set_bounds(np.array(manifest["stress_bounds"]["lo"]),
                                np.array(manifest["stress_bounds"]["hi"]))
    model.normalizer.load_state(manifest["normalizer"])
    th = manifest.get("thresholds")
    thresholds = Thresholds.from_dict(th) if th is not None else None
    return model, thresholds
