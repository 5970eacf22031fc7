"""Full model: encoder -> stress/dynamic graph -> experts -> decoders.

One forward pass consumes a single (N, T, F) window plus the prior adjacency
and produces every intermediate needed for the loss, the per-stock scores and
the market report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .config import ModelConfig
from .dyngraph import DynamicGraph, GraphState, StressIndicators, StressModel
from .encoder import Encoder, EncoderOutput, gcn_adjacency
from .moe import MixtureOfExperts, MoEOutput
from .optim import ParamStore
from .scoring import MultiScaleDecoder, ScoreNormalizer
from .tensor import Tensor

__all__ = ["MarketModel", "ModelOutput"]


@dataclass
class ModelOutput:
    encoder: EncoderOutput
    psi: Tensor
    indicators: StressIndicators
    graph: GraphState
    z_final: Tensor
    moe: MoEOutput
    e_recon: Tensor                # (N,) weighted multi-horizon error
    horizon_errors: list[Tensor]   # [(N,), (N,), (N,)] for horizons 1/3/5


class MarketModel:
    """Owns the parameter store and all four stages."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.store, rng, cfg)
        self.stress = StressModel(self.store, rng)
        self.graph = DynamicGraph(self.store, rng, cfg)
        self.moe = MixtureOfExperts(self.store, rng, cfg)
        self.decoder = MultiScaleDecoder(self.store, rng, cfg)
        self.normalizer = ScoreNormalizer()

    def forward(self, window_values: np.ndarray, prior: np.ndarray,
                adj_norm: np.ndarray | None = None) -> ModelOutput:
        if adj_norm is None:
            adj_norm = gcn_adjacency(prior)
        enc = self.encoder(window_values, adj_norm)
        psi, indicators = self.stress(window_values)
        state, z_final = self.graph(enc.z, enc.c, prior, psi)
        x_last = enc.x_norm[:, -1, :]
        moe_out = self.moe(z_final, enc.h_spat, x_last, psi)
        e_recon, horizon_errors = self.decoder(moe_out.latent, enc.x_norm)
        return ModelOutput(encoder=enc, psi=psi, indicators=indicators,
                           graph=state, z_final=z_final, moe=moe_out,
                           e_recon=e_recon, horizon_errors=horizon_errors)

    def scores(self, out: ModelOutput, training: bool) -> np.ndarray:
        """Per-stock anomaly scores in (0, 1); updates the running stats
        only when ``training`` is true."""
        return self.normalizer(out.moe.e_moe.data, out.e_recon.data, training)

    def infer(self, window_values: np.ndarray, prior: np.ndarray,
              adj_norm: np.ndarray | None = None) -> tuple[ModelOutput, np.ndarray]:
        """Gradient-free forward plus frozen-statistics scores."""
        with tz.no_grad():
            out = self.forward(window_values, prior, adj_norm)
        return out, self.scores(out, training=False)
