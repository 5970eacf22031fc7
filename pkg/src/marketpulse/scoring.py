"""Stage 4: multi-horizon reconstruction, score normalization, market index.

Per-stock anomaly scores combine the routing-weighted expert error with a
weighted sum of 1/3/5-day reconstruction errors, squashed through a sigmoid
around cross-sectional statistics. Cross-sectional scores aggregate into a
single market pressure index with five graded alert levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .layers import GRUDecoder
from .optim import ParamStore
from .tensor import Tensor

__all__ = [
    "MultiScaleDecoder", "ScoreNormalizer", "Thresholds",
    "nearest_rank", "mpi_components", "market_pressure_index",
    "alert_level", "calibrate_thresholds",
]

HORIZONS = (1, 3, 5)
HORIZON_WEIGHTS = (0.5, 0.3, 0.2)
MOE_WEIGHT = 0.6
RECON_WEIGHT = 0.4
NORM_EPS = 1e-8
EMA_DECAY = 0.99

MPI_WEIGHTS = (0.30, 0.25, 0.20, 0.15, 0.10)
TOP_FRACTION = 0.05
SMALL_N = 20  # below this, the tail component uses the single top score

ALERT_PERCENTILES = (75.0, 85.0, 95.0, 99.0)


class MultiScaleDecoder:
    """Three GRU decoders that replay the last 1, 3 and 5 normalized days."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, cfg: ModelConfig):
        self.decoders = [
            GRUDecoder(store, f"dec.h{h}", rng, cfg.latent_dim, cfg.n_features,
                       horizon=h, hidden=cfg.hidden_dim)
            for h in HORIZONS
        ]

    def __call__(self, latent: Tensor, x_norm: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Returns (weighted error (N,), per-horizon errors [(N,), ...])."""
        t = x_norm.shape[1]
        if t < max(HORIZONS):
            raise ValueError(
                f"window length {t} is shorter than the longest decode "
                f"horizon {max(HORIZONS)}")
        errors = []
        for h, dec in zip(HORIZONS, self.decoders):
            pred = dec(latent)
            target = x_norm[:, t - h:, :]
            step_err = tz.l2norm(tz.sub(target, pred), axis=-1)  # (N, h)
            errors.append(tz.tmean(step_err, axis=-1))
        total = None
        for wgt, err in zip(HORIZON_WEIGHTS, errors):
            term = tz.mul(err, wgt)
            total = term if total is None else tz.add(total, term)
        return total, errors


@dataclass
class ScoreNormalizer:
    """Sigmoid squash around cross-sectional error statistics.

    Training uses the statistics of the current cross-section and keeps an
    exponential moving average; inference uses the frozen average so a quiet
    day scores low even when every stock is quiet.
    """

    mu: float = 0.0
    sigma: float = 1.0
    initialized: bool = False

    def combine(self, e_moe: np.ndarray, e_recon: np.ndarray) -> np.ndarray:
        return MOE_WEIGHT * e_moe + RECON_WEIGHT * e_recon

    def __call__(self, e_moe: np.ndarray, e_recon: np.ndarray,
                 training: bool) -> np.ndarray:
        combined = self.combine(np.asarray(e_moe, dtype=np.float64),
                                np.asarray(e_recon, dtype=np.float64))
        if training:
            mu = float(combined.mean())
            sigma = float(combined.std())
            if not self.initialized:
                self.mu, self.sigma = mu, sigma
                self.initialized = True
            else:
                self.mu = EMA_DECAY * self.mu + (1.0 - EMA_DECAY) * mu
                self.sigma = EMA_DECAY * self.sigma + (1.0 - EMA_DECAY) * sigma
        else:
            mu, sigma = self.mu, self.sigma
        z = 2.0 * (combined - mu) / (sigma + NORM_EPS)
        return 1.0 / (1.0 + np.exp(-z))

    def state(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma,
                "initialized": self.initialized}

    def load_state(self, state: dict) -> None:
        self.mu = float(state["mu"])
        self.sigma = float(state["sigma"])
        self.initialized = bool(state["initialized"])


def nearest_rank(values: np.ndarray, pct: float) -> float:
    """Classic nearest-rank percentile: R = ceil(pct * n / 100), 1-indexed."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    n = arr.size
    if n == 0:
        raise ValueError("nearest_rank of empty array")
    rank = max(1, math.ceil(pct * n / 100.0))
    return float(arr[min(rank, n) - 1])


def mpi_components(scores: np.ndarray, weights: np.ndarray, psi: float,
                   theta: float) -> tuple[float, ...]:
    """The five ingredients of the market pressure index.

    breadth      fraction of stocks at or above the anomaly threshold
    tail         RMS of the top 5% of scores (single max when N < 20)
    dispersion   min(1, 2 * std of scores)
    coherence    agreement of routing weights across anomalous stocks
    stress       the market stress level itself
    """
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = s.size
    breadth = float((s >= theta).mean())
    top = 1 if n < SMALL_N else math.ceil(TOP_FRACTION * n)
    tail_vals = np.sort(s)[-top:]
    tail = float(np.sqrt((tail_vals ** 2).mean()))
    dispersion = float(min(1.0, 2.0 * s.std()))
    anomalous = s >= theta
    if not anomalous.any():
        coherence = 0.0
    else:
        spread = w[anomalous].std(axis=0).mean()
        coherence = float(1.0 - min(1.0, 2.0 * spread))
    stress = float(np.clip(psi, 0.0, 1.0))
    return breadth, tail, dispersion, coherence, stress


def market_pressure_index(scores: np.ndarray, weights: np.ndarray,
                          psi: float, theta: float) -> float:
    comps = mpi_components(scores, weights, psi, theta)
    return float(sum(wgt * c for wgt, c in zip(MPI_WEIGHTS, comps)))


@dataclass
class Thresholds:
    """Calibrated anomaly threshold and alert-level cut points."""

    theta: float
    alert_cuts: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        return {"theta": self.theta, "alert_cuts": list(self.alert_cuts)}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        return cls(theta=float(d["theta"]),
                   alert_cuts=tuple(float(c) for c in d["alert_cuts"]))


def alert_level(mpi: float, cuts: tuple[float, float, float, float]) -> int:
    level = 0
    for cut in cuts:
        if mpi >= cut:
            level += 1
    return level


def calibrate_thresholds(val_scores: np.ndarray,
                         val_mpi_fn) -> tuple[Thresholds, np.ndarray]:
    """Fix the anomaly threshold from validation scores, then derive alert
    cuts from the resulting validation index series.

    ``val_scores`` is the flattened per-stock-day score array from the
    validation span. ``val_mpi_fn(theta)`` must return the per-day index
    series computed with that threshold — the threshold is frozen before any
    index value exists, which the two-step call order enforces.
    """
    theta = nearest_rank(val_scores, 95.0)
    mpi_series = np.asarray(val_mpi_fn(theta), dtype=np.float64)
    cuts = tuple(nearest_rank(mpi_series, p) for p in ALERT_PERCENTILES)
    return Thresholds(theta=theta, alert_cuts=cuts), mpi_series
