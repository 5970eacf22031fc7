"""Command-line interface: generate / train / score / evaluate / ablate / sweep.

Dataset directory layout (written by ``generate``, read by the rest):
    panel.csv    long-format daily features (date, ticker, 29 columns)
    prior.csv    ticker, sector, region labels for the relationship graph
    events.json  injected anomaly labels [{date, tickers, mechanism, intensity}]
    meta.json    {"split": {"train": [lo, hi), "val": ..., "test": ...}, ...}

JSON config schemas:
    generate --config   SyntheticConfig fields (n_stocks, n_days, n_sectors,
                        n_regions, seed, ...) plus "split": [train, val, test]
                        fractions and "events": "default" or a list of
                        {mechanism, day, n_affected, intensity, duration}
    train --config      MarketAnomalyDetector keyword arguments
    ablate --grid       "default" or [{label, overrides, use_mpi}]
    sweep --spec        {"param": name, "values": [...]} (values optional)
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .data import (DataError, EventLabel, Panel, PriorGraph, WEIGHT_COLUMNS,
                   load_events_json, load_panel_csv, load_prior_csv,
                   save_events_json, save_panel_csv, save_prior_csv,
                   split_dataset, write_market_csv, write_scores_csv)
from .detector import MarketAnomalyDetector
from .harness import (AblationRow, HarnessError, default_ablation_grid,
                      detect_events, mechanism_attribution, run_ablation,
                      run_sweep, tagged_expert_weight)
from .schema import MECHANISMS
from .synthetic import (EventSpec, GeneratorError, SyntheticConfig,
                        default_event_plan, generate_synthetic_market)
from .training import TrainingError

__all__ = ["main"]

DEFAULT_SPLIT = (0.38, 0.12, 0.50)


class CliError(Exception):
    """User-facing failure: bad input file, bad config, bad flag value."""


def _read_json(path, what: str):
    if not os.path.exists(path):
        raise CliError(f"{what} file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} file {path} is not valid JSON: {exc}") from None


def _load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise CliError(f"data directory not found: {data_dir}")
    panel_path = os.path.join(data_dir, "panel.csv")
    prior_path = os.path.join(data_dir, "prior.csv")
    for p in (panel_path, prior_path):
        if not os.path.exists(p):
            raise CliError(f"missing dataset file: {p}")
    panel = load_panel_csv(panel_path)
    prior = load_prior_csv(prior_path)
    meta = {}
    meta_path = os.path.join(data_dir, "meta.json")
    if os.path.exists(meta_path):
        meta = _read_json(meta_path, "meta")
    return panel, prior, meta


def _split_ranges(panel: Panel, meta: dict) -> tuple[range, range, range]:
    if "split" in meta:
        s = meta["split"]
        try:
            return (range(*s["train"]), range(*s["val"]), range(*s["test"]))
        except (KeyError, TypeError) as exc:
            raise CliError(f"meta.json split malformed: {exc}") from None
    return split_dataset(panel.n_days, DEFAULT_SPLIT)


def _span_panel(panel: Panel, meta: dict, span: str) -> Panel:
    if span == "full":
        return panel
    tr, va, te = _split_ranges(panel, meta)
    sel = {"train": tr, "val": va, "test": te}[span]
    if len(sel) == 0:
        raise CliError(f"requested span {span!r} is empty for this dataset")
    return panel.slice_days(sel.start, sel.stop)


def _detector_params(config_path) -> dict:
    params = dict(MarketAnomalyDetector().get_params())
    if config_path is None:
        return params
    raw = _read_json(config_path, "model config")
    if not isinstance(raw, dict):
        raise CliError(f"model config {config_path} must be a JSON object")
    unknown = sorted(set(raw) - set(params))
    if unknown:
        raise CliError(f"unknown model config keys: {unknown}")
    params.update(raw)
    return params


def _weights_to_columns(weights: np.ndarray, expert_count: int) -> np.ndarray:
    """Routing mass per mechanism column, regardless of expert count."""
    cols = [tagged_expert_weight(weights, expert_count, m) for m in MECHANISMS]
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# commands


def _cmd_generate(args) -> int:
    raw = _read_json(args.config, "generator config") if args.config else {}
    if not isinstance(raw, dict):
        raise CliError("generator config must be a JSON object")
    split = tuple(raw.pop("split", DEFAULT_SPLIT))
    events_raw = raw.pop("events", "default")
    fields = {f.name for f in dataclasses.fields(SyntheticConfig)}
    unknown = sorted(set(raw) - fields)
    if unknown:
        raise CliError(f"unknown generator config keys: {unknown}")
    cfg = SyntheticConfig(**raw)
    tr, va, te = split_dataset(cfg.n_days, split)
    if events_raw == "default":
        cfg.events = default_event_plan(cfg.n_days, tr.stop, te.start,
                                        seed=cfg.seed)
    elif isinstance(events_raw, list):
        cfg.events = [EventSpec(**e) for e in events_raw]
    else:
        raise CliError('"events" must be "default" or a list of event specs')

    panel, prior, labels = generate_synthetic_market(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_panel_csv(panel, os.path.join(args.out, "panel.csv"))
    save_prior_csv(prior, os.path.join(args.out, "prior.csv"))
    save_events_json(labels, os.path.join(args.out, "events.json"))
    meta = {
        "version": __version__,
        "n_stocks": cfg.n_stocks,
        "n_days": cfg.n_days,
        "seed": cfg.seed,
        "split": {"train": [tr.start, tr.stop], "val": [va.start, va.stop],
                  "test": [te.start, te.stop]},
    }
    with open(os.path.join(args.out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    print(f"wrote {cfg.n_days} days x {cfg.n_stocks} stocks, "
          f"{len(labels)} events -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    panel, prior, meta = _load_dataset(args.data)
    params = _detector_params(args.config)
    tr, va, _ = _split_ranges(panel, meta)
    train_panel = panel.slice_days(tr.start, tr.stop)
    val_panel = panel.slice_days(va.start, va.stop) if len(va) else None
    det = MarketAnomalyDetector(**params)
    det.fit(train_panel, prior, val_panel=val_panel,
            loss_curve_path=args.loss_curve)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    det.save(args.out)
    last = det.history_[-1]
    print(f"trained {len(det.history_)} epochs "
          f"(best epoch {det.best_epoch_}, final val loss {last.val_loss:.6g}); "
          f"theta={det.thresholds_.theta:.6g} -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    det = MarketAnomalyDetector.load(args.model)
    panel, prior, meta = _load_dataset(args.data)
    scored = _span_panel(panel, meta, args.span)
    sweep = det.analyze(scored, prior)
    os.makedirs(args.out, exist_ok=True)
    wcols = _weights_to_columns(sweep.weights, det.expert_count)
    scores_path = os.path.join(args.out, "scores.csv")
    market_path = os.path.join(args.out, "market.csv")
    write_scores_csv(scores_path, sweep.dates, scored.tickers, sweep.scores,
                     wcols)
    write_market_csv(market_path, sweep.dates, sweep.mpi, sweep.components,
                     sweep.alerts)
    n_anom = int((sweep.scores >= det.thresholds_.theta).sum())
    print(f"scored {len(sweep.dates)} days x {scored.n_stocks} stocks; "
          f"{n_anom} stock-day anomalies at theta={det.thresholds_.theta:.6g}; "
          f"max MPI {sweep.mpi.max():.4f}")
    print(f"wrote {scores_path} and {market_path}")
    if args.dump_graph is not None:
        path = _dump_graph(det, scored, prior, sweep, args.dump_graph,
                           args.out)
        print(f"wrote {path}")
    return 0


def _dump_graph(det: MarketAnomalyDetector, panel: Panel, prior: PriorGraph,
                sweep, day: str, out_dir) -> str:
    """Write the fused adjacency for the window ending on ``day``."""
    if day in sweep.dates:
        idx = sweep.dates.index(day)
    else:
        try:
            idx = int(day)
        except ValueError:
            raise CliError(f"--dump-graph day {day!r} is neither a scored "
                           f"date nor an integer index") from None
        if not -len(sweep.dates) <= idx < len(sweep.dates):
            raise CliError(f"--dump-graph index {idx} out of range "
                           f"(0..{len(sweep.dates) - 1})")
        idx = idx % len(sweep.dates)
    a_fused = det.fused_adjacency(panel, prior, idx)
    label = sweep.dates[idx]
    path = os.path.join(out_dir, f"graph_{label}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ticker," + ",".join(panel.tickers) + "\n")
        for t, row in zip(panel.tickers, a_fused):
            fh.write(t + "," + ",".join(f"{v:.9g}" for v in row) + "\n")
    return path


def _cmd_evaluate(args) -> int:
    det = MarketAnomalyDetector.load(args.model)
    panel, prior, meta = _load_dataset(args.data)
    scored = _span_panel(panel, meta, args.span)
    events = load_events_json(args.events)
    if not events:
        raise CliError(f"no events in {args.events}")
    sweep = det.analyze(scored, prior)
    summary = detect_events(sweep, scored.tickers, events,
                            det.thresholds_.theta,
                            det.thresholds_.alert_cuts[2],
                            use_mpi=not args.no_mpi)
    rows = []
    for res in summary.results:
        row = {
            "date": res.event.date,
            "mechanism": res.event.mechanism,
            "detected": int(res.detected),
            "lead": res.lead if res.lead is not None else "",
            "trigger": res.trigger or "",
            "baseline": "", "peak": "", "elevation": "",
        }
        try:
            b, p, e = mechanism_attribution(sweep, scored.tickers, res.event,
                                            det.expert_count)
            row.update(baseline=f"{b:.6g}", peak=f"{p:.6g}",
                       elevation=f"{e:.6g}")
        except HarnessError:
            pass
        rows.append(row)
    rows.append({
        "date": "SUMMARY",
        "mechanism": f"{summary.n_detected}/{summary.n_scorable}",
        "detected": f"{summary.detection_rate:.4f}",
        "lead": (f"{summary.median_lead:.1f}"
                 if summary.median_lead is not None else ""),
        "trigger": "", "baseline": "", "peak": "", "elevation": "",
    })
    import csv as _csv
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"detection rate {summary.detection_rate:.1%} "
          f"({summary.n_detected}/{summary.n_scorable}), median lead "
          f"{summary.median_lead} -> {args.out}")
    return 0


def _eval_splits(args):
    panel, prior, meta = _load_dataset(args.data)
    tr, va, te = _split_ranges(panel, meta)
    if len(va) == 0 or len(te) == 0:
        raise CliError("ablate/sweep need non-empty val and test spans")
    train_panel = panel.slice_days(tr.start, tr.stop)
    val_panel = panel.slice_days(va.start, va.stop)
    test_panel = panel.slice_days(te.start, te.stop)
    events = load_events_json(args.events) if args.events else \
        load_events_json(os.path.join(args.data, "events.json"))
    return train_panel, val_panel, test_panel, prior, events


def _cmd_ablate(args) -> int:
    train_p, val_p, test_p, prior, events = _eval_splits(args)
    base = _detector_params(args.config)
    raw = _read_json(args.grid, "ablation grid") if args.grid else "default"
    if raw == "default":
        grid = default_ablation_grid()
    elif isinstance(raw, list):
        grid = [AblationRow(label=e["label"],
                            overrides=dict(e.get("overrides", {})),
                            use_mpi=bool(e.get("use_mpi", True)))
                for e in raw]
    else:
        raise CliError('ablation grid must be "default" or a list of rows')
    table = run_ablation(base, train_p, val_p, test_p, prior, events,
                         grid=grid, out_csv=args.out)
    for row in table:
        print(f"{row['label']:>22s}: {row['detected']}/{row['scorable']} "
              f"detected, median lead {row['median_lead']}")
    print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    train_p, val_p, test_p, prior, events = _eval_splits(args)
    base = _detector_params(args.config)
    raw = _read_json(args.spec, "sweep spec")
    if not isinstance(raw, dict) or "param" not in raw:
        raise CliError('sweep spec must be {"param": name, "values": [...]}')
    table = run_sweep(raw["param"], base, train_p, val_p, test_p, prior,
                      events, values=raw.get("values"), out_csv=args.out)
    for row in table:
        print(f"{row['param']}={row['value']}: {row['detected']}/"
              f"{row['scorable']} detected, median lead {row['median_lead']}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marketpulse",
        description="Explainable market anomaly detection on daily panels.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic market dataset")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit a detector on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="detector hyperparameter JSON")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-curve", help="optional loss-curve CSV path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score a dataset with a trained model")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--span", choices=("full", "train", "val", "test"),
                   default="test", help="which dataset span to score")
    p.add_argument("--dump-graph", metavar="DAY",
                   help="also write the fused adjacency for this scored date "
                        "(or integer day index) as CSV")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("evaluate", help="event detection metrics")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--events", required=True, help="event labels JSON")
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--span", choices=("full", "train", "val", "test"),
                   default="test", help="which dataset span to score")
    p.add_argument("--no-mpi", action="store_true",
                   help="disable the market-index trigger")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="train/evaluate one model per grid row")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--grid", help='grid JSON (omit for the default grid)')
    p.add_argument("--config", help="base detector hyperparameter JSON")
    p.add_argument("--events", help="event labels JSON "
                                    "(default: <data>/events.json)")
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("sweep", help="one-at-a-time hyperparameter sweep")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--spec", required=True, help="sweep spec JSON")
    p.add_argument("--config", help="base detector hyperparameter JSON")
    p.add_argument("--events", help="event labels JSON "
                                    "(default: <data>/events.json)")
    p.add_argument("--out", required=True, help="results CSV path")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DataError, GeneratorError, TrainingError, HarnessError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
