"""Session fixtures: one tiny synthetic market and one trained detector,
shared across test modules to keep the suite fast."""

import numpy as np
import pytest

from marketpulse.data import split_dataset
from marketpulse.detector import MarketAnomalyDetector
from marketpulse.synthetic import (EventSpec, SyntheticConfig,
                                   generate_synthetic_market)

TINY_EVENTS = [
    EventSpec("price_shock", 70, n_affected=4, duration=8),
    EventSpec("liquidity", 150, n_affected=4, duration=10),
    EventSpec("contagion", 185, n_affected=5, duration=15),
]

TINY_PARAMS = dict(window=10, hidden_dim=16, context_dim=8, latent_dim=8,
                   heads=2, top_k=6, max_epochs=4, patience=3, batch_size=8,
                   seed=0)


@pytest.fixture(scope="session")
def tiny_market():
    cfg = SyntheticConfig(n_stocks=12, n_days=220, n_sectors=3, n_regions=2,
                          seed=3, events=[EventSpec(**vars(e))
                                          for e in TINY_EVENTS])
    panel, prior, labels = generate_synthetic_market(cfg)
    return panel, prior, labels


@pytest.fixture(scope="session")
def tiny_splits(tiny_market):
    panel, prior, labels = tiny_market
    tr, va, te = split_dataset(panel.n_days, (0.45, 0.15, 0.40))
    return {
        "train": panel.slice_days(tr.start, tr.stop),
        "val": panel.slice_days(va.start, va.stop),
        "test": panel.slice_days(te.start, te.stop),
        "prior": prior,
        "labels": labels,
        "panel": panel,
    }


@pytest.fixture(scope="session")
def tiny_detector(tiny_splits):
    det = MarketAnomalyDetector(**TINY_PARAMS)
    det.fit(tiny_splits["train"], tiny_splits["prior"],
            val_panel=tiny_splits["val"])
    return det


@pytest.fixture(scope="session")
def tiny_sweep(tiny_detector, tiny_splits):
    return tiny_detector.analyze(tiny_splits["test"], tiny_splits["prior"])


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
