"""Scikit-learn style estimator facade over the full pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import ModelConfig, TrainConfig
from .data import Panel, PriorGraph
from .encoder import gcn_adjacency
from .model import MarketModel
from .scoring import (Thresholds, alert_level, market_pressure_index,
                      mpi_components)
from .training import TrainResult, load_checkpoint, save_checkpoint, train_model

__all__ = ["MarketAnomalyDetector", "InferenceSweep"]


@dataclass
class InferenceSweep:
    """Scored output for every full window of a panel.

    Day ``i`` of these arrays corresponds to the window ending at
    ``dates[i]``; the first ``window - 1`` panel days have no score.
    """

    dates: list[str]
    scores: np.ndarray       # (days, stocks)
    weights: np.ndarray      # (days, stocks, experts)
    psi: np.ndarray          # (days,)
    mpi: np.ndarray          # (days,)
    components: np.ndarray   # (days, 5)
    alerts: np.ndarray       # (days,) int 0..4


class MarketAnomalyDetector(BaseEstimator):
    """Unsupervised anomaly detector over a stock-feature panel.

    ``fit`` trains the reconstruction model and calibrates thresholds on a
    validation span; ``score_samples``/``predict`` score each full window of
    a panel; ``market_report`` aggregates the cross-section per day.
    """

    def __init__(self, window: int = 20, hidden_dim: int = 128,
                 context_dim: int = 64, latent_dim: int = 64, heads: int = 4,
                 gcn_layers: int = 2, top_k: int = 20, expert_count: int = 4,
                 routing: str = "soft", alpha_mode: str = "stress",
                 alpha_fixed: float = 0.5, multi_source: bool = True,
                 cross_modal: bool = True, temperature_mode: str = "formula",
                 learning_rate: float = 1e-3, batch_size: int = 32,
                 max_epochs: int = 100, patience: int = 15,
                 gamma1: float = 0.01, gamma2: float = 0.001,
                 diversity_sign: str = "reward", clip_norm: float = 5.0,
                 val_fraction: float = 0.17, seed: int = 0):
        self.window = window
        self.hidden_dim = hidden_dim
        self.context_dim = context_dim
        self.latent_dim = latent_dim
        self.heads = heads
        self.gcn_layers = gcn_layers
        self.top_k = top_k
        self.expert_count = expert_count
        self.routing = routing
        self.alpha_mode = alpha_mode
        self.alpha_fixed = alpha_fixed
        self.multi_source = multi_source
        self.cross_modal = cross_modal
        self.temperature_mode = temperature_mode
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.diversity_sign = diversity_sign
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.seed = seed

    # -- config assembly ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            window=self.window, hidden_dim=self.hidden_dim,
            context_dim=self.context_dim, latent_dim=self.latent_dim,
            heads=self.heads, gcn_layers=self.gcn_layers, top_k=self.top_k,
            expert_count=self.expert_count, routing=self.routing,
            alpha_mode=self.alpha_mode, alpha_fixed=self.alpha_fixed,
            multi_source=self.multi_source, cross_modal=self.cross_modal,
            temperature_mode=self.temperature_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            gamma1=self.gamma1, gamma2=self.gamma2,
            diversity_sign=self.diversity_sign, clip_norm=self.clip_norm,
            seed=self.seed)

    # -- fitting ------------------------------------------------------------

    def fit(self, panel: Panel, prior: PriorGraph,
            val_panel: Panel | None = None,
            loss_curve_path=None) -> "MarketAnomalyDetector":
        """Train on ``panel``; when ``val_panel`` is absent the trailing
        ``val_fraction`` of days is held out chronologically."""
        if val_panel is None:
            cut = int(round(panel.n_days * (1.0 - self.val_fraction)))
            cut = min(max(cut, 1), panel.n_days - 1)
            train_panel = panel.slice_days(0, cut)
            val_panel = panel.slice_days(cut, panel.n_days)
        else:
            train_panel = panel
        model = MarketModel(self.model_config(), seed=self.seed)
        result: TrainResult = train_model(
            model, train_panel, val_panel, prior, self.train_config(),
            loss_curve_path=loss_curve_path)
        self.model_ = result.model
        self.thresholds_ = result.thresholds
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.stopped_epoch_ = result.stopped_epoch
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this MarketAnomalyDetector is not fitted yet; "
                "call fit or load first")

    # -- inference ----------------------------------------------------------

    def analyze(self, panel: Panel, prior: PriorGraph) -> InferenceSweep:
        """Score every full window of ``panel`` with frozen statistics."""
        self._check_fitted()
        model = self.model_
        t = model.cfg.window
        n_win = panel.n_windows(t)
        if n_win < 1:
            raise ValueError(
                f"panel has {panel.n_days} days; window {t} needs at least {t}")
        adj = gcn_adjacency(prior.adjacency)
        k = len(model.moe.groups)
        scores = np.empty((n_win, panel.n_stocks))
        weights = np.empty((n_win, panel.n_stocks, k))
        psis = np.empty(n_win)
        for i in range(n_win):
            out, s = model.infer(panel.window(i, t).values, prior.adjacency, adj)
            scores[i] = s
            weights[i] = out.moe.w.data
            psis[i] = float(out.psi.data)
        theta = self.thresholds_.theta
        comps = np.empty((n_win, 5))
        mpi = np.empty(n_win)
        alerts = np.empty(n_win, dtype=int)
        for i in range(n_win):
            comps[i] = mpi_components(scores[i], weights[i], psis[i], theta)
            mpi[i] = market_pressure_index(scores[i], weights[i], psis[i], theta)
            alerts[i] = alert_level(mpi[i], self.thresholds_.alert_cuts)
        return InferenceSweep(dates=list(panel.dates[t - 1:]), scores=scores,
                              weights=weights, psi=psis, mpi=mpi,
                              components=comps, alerts=alerts)

    def score_samples(self, panel: Panel, prior: PriorGraph) -> np.ndarray:
        """Per-stock anomaly scores, one row per full window."""
        return self.analyze(panel, prior).scores

    def predict(self, panel: Panel, prior: PriorGraph) -> np.ndarray:
        """Binary anomaly flags: score at or above the calibrated threshold."""
        self._check_fitted()
        return (self.score_samples(panel, prior)
                >= self.thresholds_.theta).astype(int)

    def routing_weights(self, panel: Panel, prior: PriorGraph) -> np.ndarray:
        """Per-stock expert routing weights, one row per full window."""
        return self.analyze(panel, prior).weights

    def market_report(self, panel: Panel, prior: PriorGraph) -> InferenceSweep:
        """Full per-day market aggregation (index, components, alerts)."""
        return self.analyze(panel, prior)

    def fused_adjacency(self, panel: Panel, prior: PriorGraph,
                        window_index: int) -> np.ndarray:
        """Dense fused adjacency for one window (row = outgoing edges)."""
        self._check_fitted()
        t = self.model_.cfg.window
        out, _ = self.model_.infer(panel.window(window_index, t).values,
                                   prior.adjacency, gcn_adjacency(prior.adjacency))
        return np.asarray(out.graph.a_fused.data, dtype=np.float64)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.model_, path, self.thresholds_)

    @classmethod
    def load(cls, path) -> "MarketAnomalyDetector":
        model, thresholds = load_checkpoint(path)
        if thresholds is None:
            raise ValueError(f"{path}: checkpoint has no calibrated thresholds")
        cfg = model.cfg
        det = cls(window=cfg.window, hidden_dim=cfg.hidden_dim,
                  context_dim=cfg.context_dim, latent_dim=cfg.latent_dim,
                  heads=cfg.heads, gcn_layers=cfg.gcn_layers, top_k=cfg.top_k,
                  expert_count=cfg.expert_count, routing=cfg.routing,
                  alpha_mode=cfg.alpha_mode, alpha_fixed=cfg.alpha_fixed,
                  multi_source=cfg.multi_source, cross_modal=cfg.cross_modal,
                  temperature_mode=cfg.temperature_mode)
        det.model_ = model
        det.thresholds_ = thresholds
        det.history_ = []
        det.best_epoch_ = 0
        det.stopped_epoch_ = 0
        return det
