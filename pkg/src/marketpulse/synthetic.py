"""Synthetic equity panel generator with injectable anomaly mechanisms.

Returns follow a sector-block factor model r = m + s_c + idio whose variance
shares set the baseline correlation structure (cross-sector pairs inherit the
market share, within-sector pairs the market+sector share). Prices, volumes,
spreads, and order flow are simulated jointly; the 29 schema features are then
derived with 20-day rolling statistics.

Each event overlays one mechanism signature on its affected stocks:

  price_shock   fat-tailed return jumps (extreme z, kurtosis spike), spreads stable
  liquidity     spread path ramps ~6.5x with volume drying up, minimal price move
  contagion     a common factor lifts pairwise correlations of the affected
                block from the cross-sector baseline toward ~0.67, with
                coordinated spread widening and elevated network features
  regime_shift  drift ramp up then reversal driving RSI from ~70 toward ~30
                over a multi-week horizon

Signatures begin a few days before the labeled event date, mirroring how real
stress builds ahead of headline dates. Intensity 1.0 hits the documented
magnitudes; other values scale the deviation in units of pre-event spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import EventLabel, Panel, PriorGraph, build_prior_graph
from .schema import (CATEGORY_SLICES, FEATURE_NAMES, MECHANISMS, N_FEATURES,
                     mechanism_category)

__all__ = ["EventSpec", "SyntheticConfig", "GeneratorError",
           "generate_synthetic_market", "default_event_plan"]


class GeneratorError(ValueError):
    """Invalid generator configuration or failed signature self-check."""


@dataclass
class EventSpec:
    """One injected anomaly; ``day`` indexes the output panel (post warm-up)."""

    mechanism: str
    day: int
    n_affected: int = 10
    intensity: float = 1.0
    duration: int = 10


@dataclass
class SyntheticConfig:
    n_stocks: int = 100
    n_days: int = 1000
    n_sectors: int = 5
    n_regions: int = 4
    market_share: float = 0.23
    sector_share: float = 0.17
    daily_vol: float = 0.02
    base_spread: float = 8e-4
    base_turnover: float = 0.008
    seed: int = 7
    warmup_days: int = 60
    events: list[EventSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.n_stocks < 2 or self.n_sectors < 1 or self.n_regions < 1:
            raise GeneratorError("need at least 2 stocks and 1 sector/region")
        if self.n_sectors > self.n_stocks:
            raise GeneratorError("more sectors than stocks")
        if self.market_share + self.sector_share >= 1.0:
            raise GeneratorError("market_share + sector_share must be < 1")
        if self.n_days < 30:
            raise GeneratorError("n_days must be at least 30")
        for ev in self.events:
            if ev.mechanism not in MECHANISMS:
                raise GeneratorError(f"unknown mechanism {ev.mechanism!r}")
            if not 0 <= ev.day < self.n_days:
                raise GeneratorError(
                    f"event day {ev.day} outside output range [0, {self.n_days})")
            if ev.day + ev.duration >= self.n_days:
                raise GeneratorError(
                    f"event at day {ev.day} runs past the last day "
                    f"(duration {ev.duration}, n_days {self.n_days})")
            if not 1 <= ev.n_affected <= self.n_stocks:
                raise GeneratorError(f"n_affected {ev.n_affected} out of range")
            if ev.duration < 1:
                raise GeneratorError("event duration must be >= 1")


# per-mechanism lead, in days before the labeled date, at which the
# signature starts building (detection windows look 5 days back)
_SIG_LEAD = {"price_shock": 4, "liquidity": 7, "contagion": 7, "regime_shift": 25}

# contagion also lifts the network-level features directly, in units of
# pre-event cross-sectional std
_CONTAGION_FEATURE_LIFT = {
    "contagion_risk": 4.0,
    "systemic_risk_contribution": 3.5,
    "spillover_index": 4.0,
    "herding_measure": 3.5,
}


def default_event_plan(n_days: int, train_end: int, test_start: int,
                       window: int = 20, seed: int = 7) -> list[EventSpec]:
    """Ten balanced evaluation events, all inside the test span.

    The span before ``test_start`` is kept event-free on purpose: the model
    learns normal-regime reconstruction only, so event windows stand out at
    inference instead of being absorbed into the training distribution.
    """
    rng = np.random.default_rng(seed + 1)
    mechs = list(MECHANISMS)
    # contagion holds long enough for a full 20-day correlation window;
    # regime shifts play out over several weeks
    durations = {"price_shock": 10, "liquidity": 10, "contagion": 20,
                 "regime_shift": 15}

    first = test_start + window + 35
    last = n_days - 30
    if last <= first:
        raise GeneratorError("test span too short for the default event plan")
    days = np.linspace(first, last, 10).astype(int)
    order = [0, 1, 2, 3, 0, 1, 2, 3, int(rng.integers(4)), int(rng.integers(4))]
    return [EventSpec(mechanism=mechs[m], day=int(d), n_affected=10,
                      intensity=1.0, duration=durations[mechs[m]])
            for d, m in zip(days, order)]


def _sector_labels(cfg: SyntheticConfig) -> tuple[list[str], list[str], np.ndarray]:
    base = cfg.n_stocks // cfg.n_sectors
    rem = cfg.n_stocks % cfg.n_sectors
    sizes = [base + (1 if i < rem else 0) for i in range(cfg.n_sectors)]
    sector_id = np.repeat(np.arange(cfg.n_sectors), sizes)
    sectors = [f"S{c:02d}" for c in sector_id]
    regions = [f"R{i % cfg.n_regions}" for i in range(cfg.n_stocks)]
    return sectors, regions, sector_id


def _choose_affected(ev: EventSpec, cfg: SyntheticConfig, sector_id: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    if ev.mechanism == "contagion":
        # span sectors round-robin so the block's baseline pairwise
        # correlation sits near the cross-sector level
        by_sector = [np.flatnonzero(sector_id == c) for c in range(cfg.n_sectors)]
        for c in range(cfg.n_sectors):
            by_sector[c] = rng.permutation(by_sector[c])
        picks, c, depth = [], 0, 0
        while len(picks) < ev.n_affected:
            pool = by_sector[c % cfg.n_sectors]
            if depth < len(pool):
                picks.append(int(pool[depth]))
            c += 1
            if c % cfg.n_sectors == 0:
                depth += 1
            if depth > cfg.n_stocks:
                break
        return np.array(sorted(picks[:ev.n_affected]), dtype=np.int64)
    return np.sort(rng.choice(cfg.n_stocks, size=ev.n_affected, replace=False))


def _ramp_envelope(total_days: int, start: int, peak: int, hold_until: int,
                   decay: int) -> np.ndarray:
    """0 -> linear ramp [start, peak] -> 1 until hold_until -> linear decay."""
    env = np.zeros(total_days)
    t = np.arange(total_days)
    up = (t >= start) & (t <= peak)
    if peak > start:
        env[up] = (t[up] - start) / (peak - start)
    else:
        env[t == peak] = 1.0
    env[(t > peak) & (t <= hold_until)] = 1.0
    down = (t > hold_until) & (t <= hold_until + decay)
    env[down] = np.maximum(0.0, 1.0 - (t[down] - hold_until) / max(decay, 1))
    return env


def _onset_envelope(total_days: int, event_day: int, days: int,
                    peak_frac: float, ratio: float) -> np.ndarray:
    """Geometric pre-event buildup: ``peak_frac`` the day before the event,
    decaying backwards by ``ratio`` per day over ``days`` days.

    The geometric shape front-loads the stress into the last few pre-event
    days, so the buildup is detectable while its contribution to a 30-day
    pre-event average stays small (total mass ≤ peak_frac/(1−ratio))."""
    env = np.zeros(total_days)
    for k in range(1, days + 1):
        d = event_day - k
        if 0 <= d < total_days:
            env[d] = peak_frac * ratio ** (k - 1)
    return env


def generate_synthetic_market(config: SyntheticConfig, return_internals: bool = False):
    """Simulate the panel; returns (panel, prior_graph, event_labels).

    With ``return_internals=True`` a dict of the underlying daily series
    (returns, prices, volumes, spreads, affected index sets) is appended for
    inspection and testing.
    """
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, total = cfg.n_stocks, cfg.warmup_days + cfg.n_days
    w = cfg.warmup_days

    sectors, regions, sector_id = _sector_labels(cfg)
    tickers = [f"T{i:03d}" for i in range(n)]
    prior = build_prior_graph(tickers, sectors, regions)

    idio_share = 1.0 - cfg.market_share - cfg.sector_share
    sv = cfg.daily_vol
    mkt = rng.standard_normal(total) * (sv * np.sqrt(cfg.market_share))
    sec = rng.standard_normal((total, cfg.n_sectors)) * (sv * np.sqrt(cfg.sector_share))
    idio = rng.standard_normal((total, n)) * (sv * np.sqrt(idio_share))
    returns = mkt[:, None] + sec[:, sector_id] + idio

    # persistent stock heterogeneity
    price0 = 50.0 * np.exp(rng.normal(0.0, 0.3, size=n))
    shares_out = 1e8 * np.exp(rng.normal(0.0, 0.5, size=n))
    spread_level = cfg.base_spread * np.exp(rng.normal(0.0, 0.2, size=n))
    turnover_level = cfg.base_turnover * np.exp(rng.normal(0.0, 0.3, size=n))

    spread_noise = np.exp(rng.normal(0.0, 0.15, size=(total, n)))
    volume_noise = np.exp(rng.normal(0.0, 0.4, size=(total, n)) - 0.08)
    imb_noise = rng.normal(0.0, 0.3, size=(total, n))

    spread_mult = np.ones((total, n))
    volume_mult = np.ones((total, n))
    drift = np.zeros((total, n))

    affected_sets: list[np.ndarray] = []
    for ev in cfg.events:
        aff = _choose_affected(ev, cfg, sector_id, rng)
        affected_sets.append(aff)
        d = ev.day + w
        inten = ev.intensity
        if ev.mechanism == "price_shock":
            # escalating precursor tremors, then the jump, then an
            # elevated-volatility tail
            for back, size in ((4, 2.5), (3, -3.0), (2, 3.5), (1, -4.0)):
                returns[d - back, aff] += size * inten * sv
            returns[d, aff] += -6.0 * inten * sv
            tail = slice(d + 1, min(d + 1 + ev.duration, total))
            returns[tail, aff] *= (1.0 + 1.0 * inten)
        elif ev.mechanism == "liquidity":
            env = (_ramp_envelope(total, d, d, d + ev.duration, 7)
                   + _onset_envelope(total, d, 5, 0.5, 0.5))
            spread_mult[:, aff] *= (1.0 + (6.5 - 1.0) * inten * env)[:, None]
            volume_mult[:, aff] *= np.maximum(1.0 - 0.6 * inten * env, 0.1)[:, None]
        elif ev.mechanism == "contagion":
            env = (_ramp_envelope(total, d, d, d + ev.duration, 5)
                   + _onset_envelope(total, d, 6, 0.6, 0.5))
            lam = np.sqrt(4.0 / 3.0 * inten) * sv
            g = rng.standard_normal(total)
            returns[:, aff] += (lam * env * g)[:, None]
            spread_mult[:, aff] *= (1.0 + 1.0 * inten * env)[:, None]
        elif ev.mechanism == "regime_shift":
            env_up = _ramp_envelope(total, d - 25, d - 20, d - 8, 0)
            env_dn = _ramp_envelope(total, d - 7, d - 1, d + ev.duration, 5)
            drift[:, aff] += (0.75 * inten * sv * (env_up - 2.0 * env_dn))[:, None]

    returns = returns + drift

    prices = price0[None, :] * np.exp(np.cumsum(returns, axis=0))
    volumes = shares_out[None, :] * turnover_level[None, :] * volume_noise * volume_mult
    volumes = np.maximum(volumes, 1.0)
    spreads = spread_level[None, :] * spread_noise * spread_mult
    imbalance = np.tanh(returns / (2.0 * sv)) * 0.6 + 0.4 * imb_noise

    feats = _compute_features(returns, prices, volumes, spreads, imbalance,
                              shares_out, sector_id, cfg)

    # direct feature-space lift for contagion network features, scaled in
    # pre-event cross-sectional std units
    for ev, aff in zip(cfg.events, affected_sets):
        if ev.mechanism != "contagion":
            continue
        d = ev.day + w
        env = (_ramp_envelope(total, d, d, d + ev.duration, 5)
               + _onset_envelope(total, d, 6, 0.6, 0.5))
        base_lo, base_hi = max(0, d - 35), d - 8
        for fname, mult in _CONTAGION_FEATURE_LIFT.items():
            j = FEATURE_NAMES.index(fname)
            base = feats[base_lo:base_hi, :, j]
            sig_cs = float(np.std(base.mean(axis=0))) + 1e-9
            feats[:, aff, j] += (ev.intensity * mult * sig_cs * env)[:, None]

    feats = feats[w:]
    if not np.isfinite(feats.sum(dtype=np.float64)):
        raise GeneratorError("generator produced non-finite feature values")

    dates = [d.strftime("%Y-%m-%d")
             for d in pd.bdate_range(start="2018-01-02", periods=total)[w:]]
    panel = Panel(values=feats.astype(np.float32), dates=dates, tickers=tickers)

    labels = [EventLabel(date=dates[ev.day],
                         tickers=[tickers[i] for i in aff],
                         mechanism=ev.mechanism,
                         intensity=ev.intensity)
              for ev, aff in zip(cfg.events, affected_sets)]

    _self_check(panel, cfg, affected_sets)

    if return_internals:
        internals = {
            "returns": returns[w:], "prices": prices[w:],
            "volumes": volumes[w:], "spreads": spreads[w:],
            "affected": affected_sets, "sector_id": sector_id,
        }
        return panel, prior, labels, internals
    return panel, prior, labels


def _compute_features(returns, prices, volumes, spreads, imbalance,
                      shares_out, sector_id, cfg: SyntheticConfig) -> np.ndarray:
    total, n = returns.shape
    r = pd.DataFrame(returns)
    p = pd.DataFrame(prices)
    v = pd.DataFrame(volumes)
    s = pd.DataFrame(spreads)

    sigma20 = r.rolling(20, min_periods=5).std()
    sigma_lag = sigma20.shift(1)
    z = r / (sigma_lag + 1e-12)
    extreme = (z.abs() > 2.5).astype(float)

    r_mkt = r.mean(axis=1)
    sec_frames = {}
    for c in np.unique(sector_id):
        cols = np.flatnonzero(sector_id == c)
        block = r.iloc[:, cols]
        if len(cols) > 1:
            others = (block.sum(axis=1).to_numpy()[:, None] - block.to_numpy()) / (len(cols) - 1)
        else:
            others = np.broadcast_to(r_mkt.to_numpy()[:, None], block.shape)
        sec_frames[c] = pd.DataFrame(others, columns=cols)
    sec_mean = pd.concat(sec_frames.values(), axis=1)[list(range(n))]

    mkt_b = pd.concat([r_mkt] * n, axis=1)
    mkt_b.columns = range(n)

    corr_mkt = r.rolling(20, min_periods=10).corr(mkt_b)
    corr_sec = r.rolling(20, min_periods=10).corr(sec_mean)

    # per-sector market/sector-mean correlation, mapped back to stocks
    rho_ms = pd.DataFrame(index=r.index, columns=range(n), dtype=float)
    for c in np.unique(sector_id):
        cols = np.flatnonzero(sector_id == c)
        sec_c = sec_mean.iloc[:, cols[0]]
        rho = r_mkt.rolling(20, min_periods=10).corr(sec_c)
        for col in cols:
            rho_ms[col] = rho
    denom = (1.0 - rho_ms.pow(2)).clip(lower=0.05)
    r2_joint = (corr_mkt.pow(2) + corr_sec.pow(2)
                - 2.0 * corr_mkt * corr_sec * rho_ms) / denom
    spillover = r2_joint.clip(0.0, 1.0)

    var_mkt = r_mkt.rolling(20, min_periods=10).var()
    beta = r.rolling(20, min_periods=10).cov(mkt_b).div(var_mkt + 1e-12, axis=0)

    # return on the market's worst day inside each window, negated
    mk = r_mkt.to_numpy()
    win = np.lib.stride_tricks.sliding_window_view(mk, 20)
    argmin = win.argmin(axis=1)
    worst_day = np.arange(19, total) - 19 + argmin
    mes = np.full((total, n), np.nan)
    mes[19:] = -returns[worst_day, :]

    abs_dev = (r - mkt_b).abs()
    abs_mkt = pd.concat([r_mkt.abs()] * n, axis=1)
    abs_mkt.columns = range(n)
    herding = -abs_dev.rolling(20, min_periods=10).corr(abs_mkt)

    # average pairwise correlation proxy from rolling-standardized returns
    zstd = (r - r.rolling(20, min_periods=10).mean()) / (sigma20 + 1e-12)
    ssum = zstd.sum(axis=1)
    pair = (zstd.mul(ssum, axis=0) - zstd.pow(2)).rolling(20, min_periods=10).mean() / (n - 1)

    dollar_vol = p * v
    amihud = (r.abs() / (dollar_vol / 1e6 + 1e-12)).rolling(20, min_periods=5).mean()
    dr = r.to_numpy()
    cov_auto = pd.DataFrame(dr).rolling(20, min_periods=10).cov(
        pd.DataFrame(np.vstack([np.full((1, n), np.nan), dr[:-1]])))
    roll = 2.0 * np.sqrt(np.maximum(0.0, -cov_auto.to_numpy()))

    turnover = v / shares_out[None, :]
    turn20 = turnover.rolling(20, min_periods=5).mean()
    intensity = v / (v.rolling(20, min_periods=5).mean() + 1e-12)
    impact = (r.abs() / (turnover + 1e-12)).rolling(20, min_periods=5).mean()
    s20 = s.rolling(20, min_periods=5).mean()
    premium = s20.div(s20.median(axis=1) + 1e-12, axis=0)
    imb5 = pd.DataFrame(imbalance).rolling(5, min_periods=2).mean()

    mom5 = r.rolling(5).sum()
    mom20 = r.rolling(20).sum()
    reversal = mom5 - mom20 / 4.0
    accel = mom5 - mom5.shift(5)

    gains = r.clip(lower=0.0).rolling(14, min_periods=5).mean()
    losses = (-r.clip(upper=0.0)).rolling(14, min_periods=5).mean()
    rsi = 100.0 * gains / (gains + losses + 1e-12)

    ema12 = p.ewm(span=12, adjust=False).mean()
    ema26 = p.ewm(span=26, adjust=False).mean()
    macd_line = (ema12 - ema26) / p
    macd_sig = macd_line.ewm(span=9, adjust=False).mean()

    dlogv = np.log(v).diff()
    vp_div = -r.rolling(20, min_periods=10).corr(dlogv)

    high20 = p.rolling(20, min_periods=5).max()
    low20 = p.rolling(20, min_periods=5).min()
    srpos = (p - low20) / (high20 - low20 + 1e-12)

    pw = np.lib.stride_tricks.sliding_window_view(prices, 20, axis=0)
    cummax = np.maximum.accumulate(pw, axis=2)
    dd = ((cummax - pw) / cummax).max(axis=2)
    drawdown = np.full((total, n), np.nan)
    drawdown[19:] = dd

    cvar = -r.rolling(20, min_periods=5).min()

    # root-mean-square of the positive return component
    pos = r.clip(lower=0.0)
    upside = np.sqrt((pos ** 2).rolling(20, min_periods=5).mean())

    cols = {
        "jump_indicator": extreme.rolling(20, min_periods=5).mean(),
        "extreme_return_z": z,
        "return_kurtosis": r.rolling(20, min_periods=10).kurt(),
        "max_drawdown": pd.DataFrame(drawdown),
        "cvar_95": cvar,
        "upside_volatility": upside,
        "bid_ask_spread": s,
        "amihud_illiquidity": amihud,
        "roll_measure": pd.DataFrame(roll),
        "turnover_ratio": turn20,
        "trading_intensity": intensity,
        "price_impact": impact,
        "liquidity_risk_premium": premium,
        "order_imbalance": imb5,
        "market_correlation": corr_mkt,
        "sector_correlation": corr_sec,
        "systematic_r2": corr_mkt.pow(2),
        "contagion_risk": pair,
        "systemic_risk_contribution": pd.DataFrame(mes),
        "spillover_index": spillover,
        "herding_measure": herding,
        "momentum_5d": mom5,
        "momentum_20d": mom20,
        "momentum_reversal": reversal,
        "rsi": rsi,
        "macd_signal": macd_sig,
        "volume_price_divergence": vp_div,
        "support_resistance": srpos,
        "price_acceleration": accel,
    }
    out = np.empty((total, n, N_FEATURES))
    for j, name in enumerate(FEATURE_NAMES):
        frame = cols[name]
        arr = frame.to_numpy() if isinstance(frame, pd.DataFrame) else frame
        out[:, :, j] = np.nan_to_num(arr, nan=0.0) if name in (
            "upside_volatility", "herding_measure", "volume_price_divergence",
            "return_kurtosis") else arr
    return out


def _self_check(panel: Panel, cfg: SyntheticConfig,
                affected_sets: list[np.ndarray]) -> None:
    """Every event must move at least one of its category's features by
    >= 3 cross-sectional standard deviations on some signature day."""
    vals = panel.values.astype(np.float64)
    for ev, aff in zip(cfg.events, affected_sets):
        lead = _SIG_LEAD[ev.mechanism]
        sig_start = max(0, ev.day - lead)
        base_hi = sig_start - 5
        base_lo = max(0, base_hi - 30)
        if base_hi <= base_lo:
            continue
        sl = CATEGORY_SLICES[mechanism_category(ev.mechanism)]
        base = vals[base_lo:base_hi, :, sl]
        base_mean_aff = base[:, aff, :].mean(axis=(0, 1))
        sig_cs = base.mean(axis=0).std(axis=0) + 1e-9
        span = vals[sig_start:min(ev.day + ev.duration + 1, vals.shape[0]), :, :]
        dev = np.abs(span[:, aff, sl].mean(axis=1) - base_mean_aff) / sig_cs
        if dev.max() < 3.0:
            raise GeneratorError(
                f"{ev.mechanism} event at day {ev.day}: max category-feature "
                f"deviation {dev.max():.2f} sigma < 3; signature too weak")
