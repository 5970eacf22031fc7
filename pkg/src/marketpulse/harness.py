"""Event-detection evaluation, ablation grid, and hyperparameter sweeps."""

from __future__ import annotations

import copy
import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import EventLabel, Panel, PriorGraph
from .detector import InferenceSweep, MarketAnomalyDetector
from .moe import expert_groups
from .schema import mechanism_category

__all__ = [
    "HarnessError", "DetectionResult", "DetectionSummary", "AblationRow",
    "detect_events", "mechanism_attribution", "default_ablation_grid",
    "run_ablation", "SWEEP_TABLE", "run_sweep",
]

SCAN_DAYS = 5          # detection window: the 5 days before the event date
BASELINE_RANGE = (30, 20)   # attribution baseline: days -30..-20 inclusive
PEAK_RANGE = (5, 7)         # attribution peak search: days -5..+7 inclusive


class HarnessError(ValueError):
    """Evaluation could not be computed (missing history, unknown tickers)."""


@dataclass
class DetectionResult:
    event: EventLabel
    detected: bool
    lead: int | None          # days before the event of the first crossing
    trigger: str | None       # "stock-score" or "mpi"


@dataclass
class DetectionSummary:
    results: list[DetectionResult]
    n_scorable: int
    n_detected: int
    detection_rate: float
    median_lead: float | None


def _event_day_index(dates: list[str], date: str) -> int:
    """Position of an event date on the scored-day axis; dates are ISO
    strings so lexicographic order is chronological."""
    try:
        return dates.index(date)
    except ValueError:
        return int(np.searchsorted(np.array(dates), date))


def _ticker_columns(tickers: list[str], wanted: list[str]) -> np.ndarray:
    index = {name: i for i, name in enumerate(tickers)}
    missing = [w for w in wanted if w not in index]
    if missing:
        raise HarnessError(f"unknown tickers in event: {missing}")
    return np.array([index[w] for w in wanted], dtype=int)


def detect_events(sweep: InferenceSweep, tickers: list[str],
                  events: list[EventLabel], theta: float, mpi_p95: float,
                  use_mpi: bool = True) -> DetectionSummary:
    """Scan the 5 days before each event for a threshold crossing.

    A day triggers when any affected stock scores at or above ``theta`` or
    (unless disabled) the market index reaches ``mpi_p95``. Lead time is the
    distance from the first triggering day to the event date. Events whose
    whole scan window precedes the scored range are skipped with a warning
    and excluded from the denominator.
    """
    n_days = len(sweep.dates)
    results: list[DetectionResult] = []
    n_scorable = 0
    leads: list[int] = []
    for event in events:
        e_idx = _event_day_index(sweep.dates, event.date)
        lo = e_idx - SCAN_DAYS
        hi = e_idx  # exclusive: the event day itself is not scanned
        scan = [d for d in range(lo, hi) if 0 <= d < n_days]
        if not scan:
            warnings.warn(
                f"event {event.date} ({event.mechanism}) outside scored "
                f"range; skipped", stacklevel=2)
            results.append(DetectionResult(event, False, None, None))
            continue
        n_scorable += 1
        cols = _ticker_columns(tickers, event.tickers)
        detected = False
        lead = None
        trigger = None
        for d in scan:
            if sweep.scores[d, cols].max() >= theta:
                detected, lead, trigger = True, e_idx - d, "stock-score"
                break
            if use_mpi and sweep.mpi[d] >= mpi_p95:
                detected, lead, trigger = True, e_idx - d, "mpi"
                break
        results.append(DetectionResult(event, detected, lead, trigger))
        if detected:
            leads.append(lead)
    n_detected = len(leads)
    rate = n_detected / n_scorable if n_scorable else 0.0
    median = float(np.median(leads)) if leads else None
    return DetectionSummary(results=results, n_scorable=n_scorable,
                            n_detected=n_detected, detection_rate=rate,
                            median_lead=median)


def tagged_expert_weight(weights: np.ndarray, expert_count: int,
                         mechanism: str) -> np.ndarray:
    """Weight mass on the expert(s) covering the mechanism's category."""
    cat = mechanism_category(mechanism)
    idx = [i for i, g in enumerate(expert_groups(expert_count))
           if cat in g.categories]
    return weights[..., idx].sum(axis=-1)


def mechanism_attribution(sweep: InferenceSweep, tickers: list[str],
                          event: EventLabel, expert_count: int = 4,
                          ) -> tuple[float, float, float]:
    """(baseline, peak, elevation) of the event mechanism's routing weight.

    Baseline averages the tagged weight over days -30..-20 before the event
    across affected stocks; the peak is the maximum daily mean in days -5..+7.
    Elevation is peak/baseline - 1.
    """
    e_idx = _event_day_index(sweep.dates, event.date)
    b_lo, b_hi = e_idx - BASELINE_RANGE[0], e_idx - BASELINE_RANGE[1]
    if b_lo < 0:
        raise HarnessError(
            f"event {event.date}: needs {BASELINE_RANGE[0]} scored days of "
            f"history for the attribution baseline, have {e_idx}")
    cols = _ticker_columns(tickers, event.tickers)
    tagged = tagged_expert_weight(sweep.weights, expert_count, event.mechanism)
    baseline = float(tagged[b_lo:b_hi + 1, cols].mean())
    p_lo = max(0, e_idx - PEAK_RANGE[0])
    p_hi = min(len(sweep.dates) - 1, e_idx + PEAK_RANGE[1])
    daily = tagged[p_lo:p_hi + 1, cols].mean(axis=1)
    peak = float(daily.max())
    if baseline <= 0:
        raise HarnessError(f"event {event.date}: zero attribution baseline")
    return baseline, peak, peak / baseline - 1.0


# ---------------------------------------------------------------------------
# ablation grid


@dataclass
class AblationRow:
    label: str
    overrides: dict = field(default_factory=dict)   # detector param overrides
    use_mpi: bool = True


def default_ablation_grid() -> list[AblationRow]:
    """One switch differs from the full model per row."""
    rows = [
        AblationRow("full"),
        AblationRow("disable_mpi", use_mpi=False),
        AblationRow("disable_moe", {"expert_count": 1}),
        AblationRow("alpha_fixed_0", {"alpha_mode": "fixed", "alpha_fixed": 0.0}),
        AblationRow("alpha_fixed_1", {"alpha_mode": "fixed", "alpha_fixed": 1.0}),
        AblationRow("alpha_fixed_0.5", {"alpha_mode": "fixed", "alpha_fixed": 0.5}),
        AblationRow("alpha_learned", {"alpha_mode": "learned"}),
        AblationRow("disable_multisource", {"multi_source": False}),
        AblationRow("disable_diversity", {"gamma1": 0.0}),
        AblationRow("disable_crossmodal", {"cross_modal": False}),
        AblationRow("experts_2", {"expert_count": 2}),
        AblationRow("experts_6", {"expert_count": 6}),
        AblationRow("routing_top2", {"routing": "top2"}),
        AblationRow("routing_hard", {"routing": "hard"}),
        AblationRow("window_10", {"window": 10}),
        AblationRow("window_15", {"window": 15}),
        AblationRow("window_30", {"window": 30}),
        AblationRow("window_40", {"window": 40}),
    ]
    return rows


def _evaluate_detector(det: MarketAnomalyDetector, train_panel: Panel,
                       val_panel: Panel, eval_panel: Panel, prior: PriorGraph,
                       events: list[EventLabel], use_mpi: bool,
                       ) -> DetectionSummary:
    det.fit(train_panel, prior, val_panel=val_panel)
    sweep = det.analyze(eval_panel, prior)
    return detect_events(sweep, eval_panel.tickers, events,
                         det.thresholds_.theta,
                         det.thresholds_.alert_cuts[2], use_mpi=use_mpi)


def run_ablation(base_params: dict, train_panel: Panel, val_panel: Panel,
                 eval_panel: Panel, prior: PriorGraph,
                 events: list[EventLabel],
                 grid: list[AblationRow] | None = None,
                 out_csv=None) -> list[dict]:
    """Train and evaluate one detector per grid row on shared data/seed."""
    grid = default_ablation_grid() if grid is None else grid
    table: list[dict] = []
    for row in grid:
        params = copy.deepcopy(base_params)
        params.update(row.overrides)
        det = MarketAnomalyDetector(**params)
        summary = _evaluate_detector(det, train_panel, val_panel, eval_panel,
                                     prior, events, row.use_mpi)
        table.append({
            "label": row.label,
            "detected": summary.n_detected,
            "scorable": summary.n_scorable,
            "detection_rate": summary.detection_rate,
            "median_lead": (summary.median_lead
                            if summary.median_lead is not None else ""),
        })
    if out_csv is not None:
        _write_table(out_csv, table,
                     ["label", "detected", "scorable", "detection_rate",
                      "median_lead"])
    return table


# ---------------------------------------------------------------------------
# one-at-a-time hyperparameter sweeps


SWEEP_TABLE: dict[str, list] = {
    "hidden_dim": [64, 128, 256],
    "heads": [2, 4, 8],
    "gcn_layers": [1, 2, 3],
    "top_k": [10, 20, 30, 50],
    "latent_dim": [32, 64, 128],
    "gamma1": [0.005, 0.01, 0.02],
    "gamma2": [0.0005, 0.001, 0.002],
    "learning_rate": [1e-4, 1e-3, 1e-2],
    "batch_size": [16, 32, 64],
}


def run_sweep(param: str, base_params: dict, train_panel: Panel,
              val_panel: Panel, eval_panel: Panel, prior: PriorGraph,
              events: list[EventLabel], values: list | None = None,
              out_csv=None) -> list[dict]:
    """Vary one hyperparameter over its value list, defaults for the rest."""
    if values is None:
        if param not in SWEEP_TABLE:
            raise HarnessError(
                f"unknown sweep parameter {param!r}; "
                f"known: {sorted(SWEEP_TABLE)}")
        values = SWEEP_TABLE[param]
    table: list[dict] = []
    for value in values:
        params = copy.deepcopy(base_params)
        params[param] = value
        det = MarketAnomalyDetector(**params)
        summary = _evaluate_detector(det, train_panel, val_panel, eval_panel,
                                     prior, events, use_mpi=True)
        table.append({
            "param": param,
            "value": value,
            "detected": summary.n_detected,
            "scorable": summary.n_scorable,
            "detection_rate": summary.detection_rate,
            "median_lead": (summary.median_lead
                            if summary.median_lead is not None else ""),
        })
    if out_csv is not None:
        _write_table(out_csv, table,
                     ["param", "value", "detected", "scorable",
                      "detection_rate", "median_lead"])
    return table


def _write_table(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
