"""Feature schema: 29 per-stock daily features in four mechanism categories.

Column order is part of the on-disk CSV contract and of the checkpoint
contract; do not reorder.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "FEATURE_CATEGORIES",
    "FEATURE_NAMES",
    "FEATURE_UNITS",
    "CATEGORY_NAMES",
    "CATEGORY_SIZES",
    "CATEGORY_SLICES",
    "N_FEATURES",
    "MECHANISMS",
    "feature_index",
    "category_of",
]

# category -> ordered feature list
FEATURE_CATEGORIES: dict[str, list[str]] = {
    "price_shock": [
        "jump_indicator",
        "extreme_return_z",
        "return_kurtosis",
        "max_drawdown",
        "cvar_95",
        "upside_volatility",
    ],
    "liquidity": [
        "bid_ask_spread",
        "amihud_illiquidity",
        "roll_measure",
        "turnover_ratio",
        "trading_intensity",
        "price_impact",
        "liquidity_risk_premium",
        "order_imbalance",
    ],
    "contagion": [
        "market_correlation",
        "sector_correlation",
        "systematic_r2",
        "contagion_risk",
        "systemic_risk_contribution",
        "spillover_index",
        "herding_measure",
    ],
    "momentum": [
        "momentum_5d",
        "momentum_20d",
        "momentum_reversal",
        "rsi",
        "macd_signal",
        "volume_price_divergence",
        "support_resistance",
        "price_acceleration",
    ],
}

CATEGORY_NAMES: tuple[str, ...] = tuple(FEATURE_CATEGORIES)

FEATURE_NAMES: tuple[str, ...] = tuple(
    name for cat in CATEGORY_NAMES for name in FEATURE_CATEGORIES[cat]
)

N_FEATURES: int = len(FEATURE_NAMES)

CATEGORY_SIZES: dict[str, int] = {c: len(v) for c, v in FEATURE_CATEGORIES.items()}

# unit tags for documentation and sanity checks on ingested data
FEATURE_UNITS: dict[str, str] = {
    "jump_indicator": "fraction",
    "extreme_return_z": "z-score",
    "return_kurtosis": "dimensionless",
    "max_drawdown": "fraction",
    "cvar_95": "return",
    "upside_volatility": "return-std",
    "bid_ask_spread": "fraction-of-price",
    "amihud_illiquidity": "abs-return-per-dollar",
    "roll_measure": "fraction-of-price",
    "turnover_ratio": "fraction",
    "trading_intensity": "ratio",
    "price_impact": "abs-return-per-volume",
    "liquidity_risk_premium": "spread-ratio",
    "order_imbalance": "fraction",
    "market_correlation": "correlation",
    "sector_correlation": "correlation",
    "systematic_r2": "fraction",
    "contagion_risk": "score",
    "systemic_risk_contribution": "fraction",
    "spillover_index": "score",
    "herding_measure": "score",
    "momentum_5d": "return",
    "momentum_20d": "return",
    "momentum_reversal": "return-diff",
    "rsi": "index-0-100",
    "macd_signal": "price-diff",
    "volume_price_divergence": "correlation",
    "support_resistance": "fraction",
    "price_acceleration": "return-diff",
}

# mechanism tags used by event labels and expert attribution, aligned with
# the category order above
MECHANISMS: tuple[str, ...] = ("price_shock", "liquidity", "contagion", "regime_shift")

_MECHANISM_TO_CATEGORY = {
    "price_shock": "price_shock",
    "liquidity": "liquidity",
    "contagion": "contagion",
    "regime_shift": "momentum",
}


def _build_slices() -> dict[str, slice]:
    out = {}
    start = 0
    for cat in CATEGORY_NAMES:
        n = CATEGORY_SIZES[cat]
        out[cat] = slice(start, start + n)
        start += n
    return out


CATEGORY_SLICES: dict[str, slice] = _build_slices()


def feature_index(name: str) -> int:
    try:
        return FEATURE_NAMES.index(name)
    except ValueError:
        raise KeyError(f"unknown feature name: {name!r}") from None


def category_of(name: str) -> str:
    for cat, names in FEATURE_CATEGORIES.items():
        if name in names:
            return cat
    raise KeyError(f"unknown feature name: {name!r}")


def mechanism_category(mechanism: str) -> str:
    """Map an event mechanism tag to the feature category its expert reads."""
    try:
        return _MECHANISM_TO_CATEGORY[mechanism]
    except KeyError:
        raise KeyError(
            f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}") from None


def category_mask(cat: str) -> np.ndarray:
    """Boolean mask over the 29 feature columns selecting one category."""
    m = np.zeros(N_FEATURES, dtype=bool)
    m[CATEGORY_SLICES[cat]] = True
    return m
