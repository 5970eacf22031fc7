"""Panel containers, prior-graph construction, dataset splits, and file IO.

On-disk formats:
  feature CSV   header ``date,ticker,<29 feature names in schema order>``,
                ISO-8601 dates, UTF-8, one row per (date, ticker)
  prior CSV     header ``ticker,sector,region``
  event JSON    array of {date, tickers, mechanism, intensity}
  score CSV     ``date,ticker,score,w_price_shock,w_liquidity,w_contagion,w_momentum``
  market CSV    ``date,mpi,c1,c2,c3,c4,c5,alert_level``

Floats are written with ``%.9g`` so float32 values survive a text round-trip
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .schema import FEATURE_NAMES, MECHANISMS, N_FEATURES

__all__ = [
    "DataError",
    "Panel",
    "PanelWindow",
    "PriorGraph",
    "EventLabel",
    "build_prior_graph",
    "load_panel_csv",
    "save_panel_csv",
    "load_prior_csv",
    "save_prior_csv",
    "load_events_json",
    "save_events_json",
    "split_dataset",
    "write_scores_csv",
    "read_scores_csv",
    "write_market_csv",
    "read_market_csv",
]

# forward-fill tolerance for missing observations, in business days
MAX_FFILL_DAYS = 5

FLOAT_FMT = "%.9g"

WEIGHT_COLUMNS = ("w_price_shock", "w_liquidity", "w_contagion", "w_momentum")


class DataError(ValueError):
    """Malformed input data; message locates the offending row/column."""


@dataclass
class PanelWindow:
    """One sliding window: values[stock, day-in-window, feature]."""

    values: np.ndarray
    tickers: list[str]
    dates: list[str]

    def __post_init__(self):
        n, t, f = self.values.shape
        if n != len(self.tickers) or t != len(self.dates) or f != N_FEATURES:
            raise DataError(
                f"window shape {self.values.shape} inconsistent with "
                f"{len(self.tickers)} tickers / {len(self.dates)} dates / {N_FEATURES} features")

    @property
    def end_date(self) -> str:
        return self.dates[-1]


@dataclass
class Panel:
    """Full panel: values[day, stock, feature], dates ascending business days."""

    values: np.ndarray
    dates: list[str]
    tickers: list[str]

    def __post_init__(self):
        d, n, f = self.values.shape
        if d != len(self.dates) or n != len(self.tickers) or f != N_FEATURES:
            raise DataError(
                f"panel shape {self.values.shape} inconsistent with "
                f"{len(self.dates)} dates / {len(self.tickers)} tickers / {N_FEATURES} features")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.values.shape[1]

    def n_windows(self, window: int) -> int:
        return max(0, self.n_days - window + 1)

    def window(self, index: int, window: int) -> PanelWindow:
        """Window ``index`` ends at day ``index + window - 1``."""
        if not 0 <= index < self.n_windows(window):
            raise IndexError(f"window index {index} out of range")
        sl = self.values[index:index + window]
        return PanelWindow(
            values=np.transpose(sl, (1, 0, 2)),
            tickers=self.tickers,
            dates=self.dates[index:index + window],
        )

    def windows(self, window: int) -> list[PanelWindow]:
        return [self.window(i, window) for i in range(self.n_windows(window))]

    def slice_days(self, start: int, stop: int) -> "Panel":
        return Panel(self.values[start:stop], self.dates[start:stop], self.tickers)

    def date_index(self, date: str) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise DataError(f"date {date!r} not in panel range "
                            f"[{self.dates[0]}, {self.dates[-1]}]") from None


@dataclass
class PriorGraph:
    """Binary relationship graph: 1 iff same sector or same region."""

    adjacency: np.ndarray
    tickers: list[str]
    sectors: list[str]
    regions: list[str]

    def __post_init__(self):
        a = self.adjacency
        n = len(self.tickers)
        if a.shape != (n, n):
            raise DataError(f"adjacency shape {a.shape} != ({n}, {n})")
        if not np.array_equal(a, a.T):
            raise DataError("prior adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise DataError("prior adjacency must have a zero diagonal")
        if not np.isin(a, (0.0, 1.0)).all():
            raise DataError("prior adjacency entries must be 0 or 1")


@dataclass
class EventLabel:
    date: str
    tickers: list[str]
    mechanism: str
    intensity: float = 1.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise DataError(
                f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if not self.tickers:
            raise DataError(f"event on {self.date} has an empty ticker list")


def build_prior_graph(tickers: list[str], sectors: list[str],
                      regions: list[str]) -> PriorGraph:
    n = len(tickers)
    if n < 2:
        raise DataError("prior graph needs at least 2 stocks")
    if len(sectors) != n or len(regions) != n:
        raise DataError("tickers, sectors, regions must have equal length")
    for i, (s, r) in enumerate(zip(sectors, regions)):
        if not s or not r:
            raise DataError(f"stock {tickers[i]!r} missing sector or region label")
    sec = np.asarray(sectors, dtype=object)
    reg = np.asarray(regions, dtype=object)
    adj = ((sec[:, None] == sec[None, :]) | (reg[:, None] == reg[None, :]))
    adj = adj.astype(np.float32)
    np.fill_diagonal(adj, 0.0)
    return PriorGraph(adjacency=adj, tickers=list(tickers),
                      sectors=list(sectors), regions=list(regions))


def _parse_dates(raw: pd.Series, what: str) -> None:
    parsed = pd.to_datetime(raw, format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(
            f"{what}: unparseable ISO-8601 date {raw.iloc[row]!r} at data row {row + 1}")


def load_panel_csv(path) -> Panel:
    """Load a feature CSV into a dense panel.

    Missing (date, ticker) rows and empty cells are forward-filled per stock
    for at most MAX_FFILL_DAYS consecutive days; anything worse is rejected.
    """
    df = pd.read_csv(path, dtype={"date": str, "ticker": str})
    required = ["date", "ticker", *FEATURE_NAMES]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"feature CSV {path}: missing columns {missing}")
    if df.empty:
        raise DataError(f"feature CSV {path}: no data rows")
    _parse_dates(df["date"], f"feature CSV {path}")

    for col in FEATURE_NAMES:
        coerced = pd.to_numeric(df[col], errors="coerce")
        raw = df[col]
        bad = coerced.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"feature CSV {path}: unparseable number {raw.iloc[row]!r} "
                f"at data row {row + 1}, column {col!r}")
        df[col] = coerced

    dup = df.duplicated(subset=["date", "ticker"])
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(
            f"feature CSV {path}: duplicate (date, ticker) at data row {row + 1}: "
            f"({df['date'].iloc[row]}, {df['ticker'].iloc[row]})")

    dates = sorted(df["date"].unique())
    tickers = sorted(df["ticker"].unique())
    _check_date_gaps(dates, path)

    grid = pd.MultiIndex.from_product([dates, tickers], names=["date", "ticker"])
    wide = df.set_index(["date", "ticker"]).reindex(grid)
    arr = wide[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
    arr = arr.reshape(len(dates), len(tickers), N_FEATURES)
    arr = _forward_fill(arr, dates, tickers, path)
    return Panel(values=arr.astype(np.float32), dates=list(dates), tickers=list(tickers))


def _check_date_gaps(dates: list[str], path) -> None:
    d = np.array(dates, dtype="datetime64[D]")
    if len(d) > 1:
        # business days strictly between consecutive observations
        gaps = np.busday_count(d[:-1] + 1, d[1:])
        worst = int(gaps.max())
        if worst > MAX_FFILL_DAYS:
            i = int(gaps.argmax())
            raise DataError(
                f"feature CSV {path}: gap of {worst} business days between "
                f"{dates[i]} and {dates[i + 1]} exceeds {MAX_FFILL_DAYS}")


def _forward_fill(arr: np.ndarray, dates: list[str], tickers: list[str], path) -> np.ndarray:
    nan0 = np.isnan(arr[0])
    if nan0.any():
        s, f = np.argwhere(nan0)[0]
        raise DataError(
            f"feature CSV {path}: no value for ticker {tickers[s]!r}, "
            f"feature {FEATURE_NAMES[f]!r} on first date {dates[0]}")
    out = arr.copy()
    run = np.zeros(arr.shape[1:], dtype=np.int64)
    for t in range(1, arr.shape[0]):
        nan_mask = np.isnan(out[t])
        run = np.where(nan_mask, run + 1, 0)
        if run.max() > MAX_FFILL_DAYS:
            s, f = np.argwhere(run > MAX_FFILL_DAYS)[0]
            raise DataError(
                f"feature CSV {path}: ticker {tickers[s]!r}, feature "
                f"{FEATURE_NAMES[f]!r} missing more than {MAX_FFILL_DAYS} "
                f"consecutive days ending {dates[t]}")
        out[t][nan_mask] = out[t - 1][nan_mask]
    return out


def save_panel_csv(panel: Panel, path) -> None:
    d, n, _ = panel.values.shape
    df = pd.DataFrame({
        "date": np.repeat(panel.dates, n),
        "ticker": np.tile(panel.tickers, d),
    })
    flat = panel.values.reshape(d * n, N_FEATURES)
    for j, name in enumerate(FEATURE_NAMES):
        df[name] = flat[:, j]
    df.to_csv(path, index=False, float_format=FLOAT_FMT)


def load_prior_csv(path) -> PriorGraph:
    df = pd.read_csv(path, dtype=str)
    missing = [c for c in ("ticker", "sector", "region") if c not in df.columns]
    if missing:
        raise DataError(f"prior CSV {path}: missing columns {missing}")
    if df["ticker"].duplicated().any():
        row = int(np.flatnonzero(df["ticker"].duplicated().to_numpy())[0])
        raise DataError(f"prior CSV {path}: duplicate ticker at data row {row + 1}")
    blank = df["sector"].isna() | df["region"].isna()
    if blank.any():
        row = int(np.flatnonzero(blank.to_numpy())[0])
        raise DataError(
            f"prior CSV {path}: missing sector/region for ticker "
            f"{df['ticker'].iloc[row]!r} at data row {row + 1}")
    order = np.argsort(df["ticker"].to_numpy())
    df = df.iloc[order]
    return build_prior_graph(df["ticker"].tolist(), df["sector"].tolist(),
                             df["region"].tolist())


def save_prior_csv(graph: PriorGraph, path) -> None:
    pd.DataFrame({
        "ticker": graph.tickers,
        "sector": graph.sectors,
        "region": graph.regions,
    }).to_csv(path, index=False)


def load_events_json(path) -> list[EventLabel]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DataError(f"event JSON {path}: top level must be an array")
    events = []
    for i, item in enumerate(raw):
        try:
            events.append(EventLabel(
                date=str(item["date"]),
                tickers=list(item["tickers"]),
                mechanism=str(item["mechanism"]),
                intensity=float(item.get("intensity", 1.0)),
            ))
        except (KeyError, TypeError) as exc:
            raise DataError(f"event JSON {path}: malformed entry {i}: {exc}") from None
    return events


def save_events_json(events: list[EventLabel], path) -> None:
    payload = [
        {"date": e.date, "tickers": e.tickers, "mechanism": e.mechanism,
         "intensity": e.intensity}
        for e in events
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def split_dataset(n_days: int, ratios: tuple[float, float, float] = (0.618, 0.127, 0.255),
                  ) -> tuple[range, range, range]:
    """Chronological train/validation/test day-index ranges."""
    if len(ratios) != 3:
        raise DataError("ratios must be (train, validation, test)")
    for r in ratios:
        if r < 0.0 or r > 1.0:
            raise DataError(f"split ratio {r} outside [0, 1]")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {sum(ratios)}")
    n_train = int(round(n_days * ratios[0]))
    n_val = int(round(n_days * ratios[1]))
    n_train = min(n_train, n_days)
    n_val = min(n_val, n_days - n_train)
    return (range(0, n_train),
            range(n_train, n_train + n_val),
            range(n_train + n_val, n_days))


def write_scores_csv(path, dates: list[str], tickers: list[str],
                     scores: np.ndarray, weights: np.ndarray) -> None:
    """scores: (days, stocks); weights: (days, stocks, 4) in mechanism order."""
    d, n = scores.shape
    df = pd.DataFrame({
        "date": np.repeat(dates, n),
        "ticker": np.tile(tickers, d),
        "score": scores.reshape(-1),
    })
    flat_w = weights.reshape(d * n, 4)
    for j, col in enumerate(WEIGHT_COLUMNS):
        df[col] = flat_w[:, j]
    df.to_csv(path, index=False, float_format=FLOAT_FMT)


def read_scores_csv(path) -> tuple[list[str], list[str], np.ndarray, np.ndarray]:
    df = pd.read_csv(path, dtype={"date": str, "ticker": str})
    required = ["date", "ticker", "score", *WEIGHT_COLUMNS]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"score CSV {path}: missing columns {missing}")
    dates = list(dict.fromkeys(df["date"]))
    tickers = sorted(df["ticker"].unique())
    idx = pd.MultiIndex.from_product([dates, tickers], names=["date", "ticker"])
    wide = df.set_index(["date", "ticker"]).reindex(idx)
    if wide["score"].isna().any():
        raise DataError(f"score CSV {path}: missing (date, ticker) combinations")
    d, n = len(dates), len(tickers)
    scores = wide["score"].to_numpy(dtype=np.float32).reshape(d, n)
    weights = wide[list(WEIGHT_COLUMNS)].to_numpy(dtype=np.float32).reshape(d, n, 4)
    return dates, tickers, scores, weights


def write_market_csv(path, dates: list[str], mpi: np.ndarray,
                     components: np.ndarray, alert_levels: np.ndarray) -> None:
    """components: (days, 5) in c1..c5 order; alert_levels: int in 0..4."""
    df = pd.DataFrame({"date": dates, "mpi": mpi})
    for j in range(5):
        df[f"c{j + 1}"] = components[:, j]
    df["alert_level"] = [f"L{int(a)}" for a in alert_levels]
    df.to_csv(path, index=False, float_format=FLOAT_FMT)


def read_market_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    df = pd.read_csv(path, dtype={"date": str, "alert_level": str})
    required = ["date", "mpi", "c1", "c2", "c3", "c4", "c5", "alert_level"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"market CSV {path}: missing columns {missing}")
    dates = df["date"].tolist()
    mpi = df["mpi"].to_numpy(dtype=np.float32)
    comps = df[["c1", "c2", "c3", "c4", "c5"]].to_numpy(dtype=np.float32)
    levels = np.array([int(s.lstrip("L")) for s in df["alert_level"]], dtype=np.int64)
    return dates, mpi, comps, levels
