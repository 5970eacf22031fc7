"""Mechanism-aware anomaly detection for equity panels.

The pipeline encodes per-stock feature windows, learns a stress-modulated
dynamic relationship graph, routes stocks through mechanism-specialized
reconstruction experts, and aggregates per-stock scores into a market
pressure index with graded alert levels.
"""

from .schema import FEATURE_CATEGORIES, FEATURE_NAMES, N_FEATURES

__version__ = "0.1.0"

__all__ = [
    "MarketAnomalyDetector",
    "FEATURE_NAMES",
    "FEATURE_CATEGORIES",
    "N_FEATURES",
    "__version__",
]


def __getattr__(name):
    # deferred so light-weight users (schema/data tooling) avoid pulling in
    # the full model stack
    if name == "MarketAnomalyDetector":
        from .detector import MarketAnomalyDetector
        return MarketAnomalyDetector
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
