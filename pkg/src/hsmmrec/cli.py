"""Command-line entry point: ``hsmmrec {ingest,train,predict,evaluate,simulate,analyze}``.

A run is described by a JSON config (see ``DEFAULT_CONFIG``); flags override
single fields. Every command writes its outputs plus ``manifest.json`` into
the output directory.

Exit codes: 0 ok, 1 unexpected, 2 I/O or parse error, 3 empty dataset after
filtering, 4 structurally impossible model, 5 model/snapshot mismatch or
missing model, 6 unknown baseline.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .dataset import (EventFormatError, FilterCriteria, GridSpanError, PeriodGrid, RawEvent, filter_activity,
                      load_dataset, parse_events, periodize, save_dataset, summary, write_events)
from .estimation import EmOptions, PriorSpec, StructuralError, batch_posteriors, check_structure, em_fit
from .model import TrainingMetadata, load_model, sample_dataset, save_model
from .prediction import predict, top_n, write_predictions
from .synthetic import drifting_interest_params

logger = logging.getLogger("hsmmrec")

DEFAULT_CONFIG = {
    "paths": {"events": None, "snapshot": None, "model": None, "out": "out"},
    "period": {"mode": "month", "days": 30},
    "filter": {"min_events_per_item": 0, "min_events_per_user": 0, "distinct": False},
    "model": {"K": 40, "M": 5, "alpha_prior": 100.0, "allow_self_transition": False, "seed": 0,
              "max_iterations": 200, "rel_tol": 1e-6, "prediction_mode": "exact"},
    "plan": {"train_window": None, "top_n": [5, 10], "repetitions": 10, "policy": "all-items"},
    "baselines": {
        "methods": ["HMM", "KC", "tIB", "pLSA", "UB", "LA"],
        "params": {"HMM": {"K": 40}, "KC": {"kc_theta": 0.8}, "tIB": {"tib_lambda": 0.9}, "pLSA": {"z": 30}},
        "grids": {"KC": {"kc_theta": [round(0.1 * i, 1) for i in range(1, 10)]},
                  "tIB": {"tib_lambda": [round(0.1 * i, 1) for i in range(1, 10)]}},
        "grid_search": False,
    },
    "simulate": {"users": 200, "periods": 12, "items": 40, "states": 4, "max_duration": 4},
    "analysis": {"epsilon": 0.02, "soft_durations": False, "top_states": 5},
    "threads": None,
}

# fields that do not change numeric results
NON_SEMANTIC = (("threads",), ("paths", "out"))


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _merge(base, over):
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                _merge(cfg, json.load(fh))
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}", 2) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config}: {exc}", 2) from None
    flags = {
        "seed": ("model", "seed"), "states": ("model", "K"), "max_duration": ("model", "M"),
        "alpha": ("model", "alpha_prior"), "train_window": ("plan", "train_window"),
        "top_n": ("plan", "top_n"), "out": ("paths", "out"), "events": ("paths", "events"),
        "snapshot": ("paths", "snapshot"), "model": ("paths", "model"),
    }
    for flag, (block, key) in flags.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[block][key] = v
    if args.threads is not None:
        cfg["threads"] = args.threads
    return cfg


def config_hash(cfg: dict) -> str:
    c = copy.deepcopy(cfg)
    for path in NON_SEMANTIC:
        node = c
        for key in path[:-1]:
            node = node.get(key, {})
        node.pop(path[-1], None)
    return hashlib.sha256(json.dumps(c, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, files: list[str]) -> None:
    doc = {"command": command, "config_hash": config_hash(cfg), "files": sorted(files),
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), "config": cfg}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _require(path, what, code=2) -> Path:
    if not path:
        raise CliError(f"no {what} path configured", code)
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", code)
    return p


def _out(cfg) -> Path:
    out = Path(cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg):
    p = _require(cfg["paths"]["snapshot"], "snapshot")
    try:
        return load_dataset(p)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read snapshot {p}: {exc}", 2) from None


def _model(cfg, ds):
    p = _require(cfg["paths"]["model"], "model", code=5)
    try:
        params, vocab, meta = load_model(p)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read model {p}: {exc}", 5) from None
    if tuple(vocab) != tuple(ds.items):
        raise CliError(f"item vocabulary of {p} does not match the snapshot", 5)
    return params


def _options(cfg, **over) -> EmOptions:
    m = cfg["model"]
    kw = dict(max_iterations=int(m["max_iterations"]), rel_tol=float(m["rel_tol"]), seed=int(m["seed"]),
              allow_self_transition=bool(m["allow_self_transition"]))
    kw.update(over)
    return EmOptions(**kw)


def _top_ns(cfg) -> list[int]:
    v = cfg["plan"]["top_n"]
    return [int(x) for x in (v if isinstance(v, (list, tuple)) else str(v).split(","))]


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg) -> list[str]:
    path = _require(cfg["paths"]["events"], "events file")
    try:
        events = parse_events(path)
        ds = periodize(events, mode=cfg["period"]["mode"], days=int(cfg["period"]["days"]))
    except (EventFormatError, GridSpanError) as exc:
        raise CliError(f"{path}: {exc}", 2) from None
    f = cfg["filter"]
    ds, report = filter_activity(ds, FilterCriteria(int(f["min_events_per_item"]), int(f["min_events_per_user"]),
                                                    bool(f["distinct"])))
    if ds.n_users == 0 or ds.n_items == 0 or ds.counts.nnz == 0:
        raise CliError("empty dataset after filtering", 3)
    out = _out(cfg)
    save_dataset(out / "snapshot.npz", ds)
    s = summary(ds)
    print("users  items  interactions  periods  span")
    print(f"{s['users']}  {s['items']}  {s['interactions']}  {s['periods']}  {s['start']}..{s['last_period']}")
    if report.cascade:
        print("note: a second filtering pass would remove more rows")
    return ["snapshot.npz"]


def cmd_train(cfg) -> list[str]:
    ds = _snapshot(cfg)
    m = cfg["model"]
    K, M = int(m["K"]), int(m["M"])
    try:
        check_structure(K, M, ds.T, bool(m["allow_self_transition"]))
        params, report = em_fit(ds, K, M, PriorSpec(float(m["alpha_prior"])), _options(cfg))
    except StructuralError as exc:
        raise CliError(str(exc), 4) from None
    out = _out(cfg)
    save_model(out / "model.json", params, ds.items,
               TrainingMetadata(int(m["seed"]), report.iterations, report.final,
                                {"converged": report.converged}))
    (out / "fit_log.csv").write_text("\n".join(report.log_lines()) + "\n", encoding="utf-8")
    status = "converged" if report.converged else "warning: not converged (iteration cap)"
    print(f"{status} after {report.iterations} iteration(s); penalized log-likelihood {report.final:.6f}")
    return ["model.json", "fit_log.csv"]


def cmd_predict(cfg) -> list[str]:
    ds = _snapshot(cfg)
    params = _model(cfg, ds)
    N = _top_ns(cfg)[0]
    probs = predict(ds, params, cfg["model"]["prediction_mode"]).probs
    active = np.flatnonzero(ds.totals.sum(axis=1) > 0)
    consumed = ds.aggregate().tolil().rows
    lists = [top_n(probs[u], N, cfg["plan"]["policy"], consumed[u], user=int(u)) for u in active]
    out = _out(cfg)
    write_predictions(out / "predictions.csv", lists, ds)
    return ["predictions.csv"]


def _train_window(cfg, T):
    n = cfg["plan"]["train_window"]
    return max(1, min(T - 1, int(round(2 * T / 3)))) if n is None else int(n)


def _recommenders(cfg, ds, n):
    m, b = cfg["model"], cfg["baselines"]
    unknown = [name for name in b["methods"] if name not in ev.BASELINE_NAMES]
    if unknown:
        raise CliError(f"unknown baseline(s) {', '.join(unknown)}; valid names: {', '.join(ev.BASELINE_NAMES)}", 6)
    K, M = int(m["K"]), int(m["M"])
    try:
        check_structure(K, M, n, bool(m["allow_self_transition"]))
    except StructuralError as exc:
        raise CliError(str(exc), 4) from None
    opts = _options(cfg)
    recs = [ev.hsmm_recommender(K, M, float(m["alpha_prior"]), opts, m["prediction_mode"])]
    for name in b["methods"]:
        hp = dict(b.get("params", {}).get(name, {}))
        if name == "HMM":
            hp.setdefault("K", K)
            hp.update(alpha=float(m["alpha_prior"]), options=opts)
        grid = b.get("grids", {}).get(name)
        if b.get("grid_search") and grid:
            best, _ = ev.grid_search(ds, n, lambda **kw: ev.baseline_recommender(name, **{**hp, **kw}), grid,
                                     seed=int(m["seed"]))
            hp.update(best)
        recs.append(ev.baseline_recommender(name, **hp))
    return recs


def cmd_evaluate(cfg) -> list[str]:
    ds = _snapshot(cfg)
    n = _train_window(cfg, ds.T)
    recs = _recommenders(cfg, ds, n)
    plan = ev.RollingPlan(n, tuple(recs), tuple(_top_ns(cfg)), int(cfg["plan"]["repetitions"]),
                          policy=cfg["plan"]["policy"], seed=int(cfg["model"]["seed"]),
                          threads=int(cfg["threads"] or os.cpu_count() or 1))
    try:
        report = ev.rolling_evaluate(ds, plan)
    except ValueError as exc:
        raise CliError(str(exc), 2) from None
    out = _out(cfg)
    report.write_rounds(out / "rounds.csv")
    table = report.summary_table()
    (out / "summary.txt").write_text(table + "\n" + "".join(d + "\n" for d in report.diagnostics), encoding="utf-8")
    print(table)
    return ["rounds.csv", "summary.txt"]


def cmd_simulate(cfg) -> list[str]:
    s, seed = cfg["simulate"], int(cfg["model"]["seed"])
    params = drifting_interest_params(int(s["states"]), int(s["max_duration"]), int(s["items"]), seed=seed)
    T = int(s["periods"])
    grid = PeriodGrid(cfg["period"]["mode"], 0, T, int(cfg["period"]["days"]))
    ds, _ = sample_dataset(params, int(s["users"]), T, seed, grid=grid)
    coo = ds.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    events = [RawEvent(ds.users[r // ds.T], ds.items[c], ds.grid.period_start(r % ds.T), int(v))
              for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order])]
    out = _out(cfg)
    write_events(out / "events.csv", events)
    return ["events.csv"]


def cmd_analyze(cfg) -> list[str]:
    ds = _snapshot(cfg)
    params = _model(cfg, ds)
    a = cfg["analysis"]
    out = _out(cfg)
    hists = ev.duration_histograms(ds, params, soft=bool(a["soft_durations"]))
    ev.write_table(out / "duration_histograms.csv", ["user_id"] + [f"d{d + 1}" for d in range(hists.shape[1])],
                   ([ds.users[u]] + [repr(float(v)) for v in h] for u, h in enumerate(hists)))
    shapes = ev.shape_counts(hists, float(a["epsilon"])) if hists.shape[1] >= 2 else {}
    ev.write_table(out / "duration_shapes.csv", ["shape", "users"], shapes.items())
    occ = batch_posteriors(ds, params).occupancy
    _, counts = ev.states_per_user(occ)
    ev.write_table(out / "states_per_user.csv", ["states", "users"], enumerate(counts.tolist()))
    tl = ev.state_timeline(occ, int(a["top_states"]), active=ds.totals > 0)
    ev.write_table(out / "state_timeline.csv", ["state"] + [f"t{t}" for t in range(ds.T)],
                   ([int(k)] + row.tolist() for k, row in zip(tl.states, tl.counts)))
    return ["duration_histograms.csv", "duration_shapes.csv", "states_per_user.csv", "state_timeline.csv"]


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "simulate": cmd_simulate, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--states", type=int, help="number of latent states K")
    common.add_argument("--max-duration", type=int, help="maximum stay length M")
    common.add_argument("--alpha", type=float, help="Dirichlet prior concentration")
    common.add_argument("--train-window", type=int, help="training periods per round")
    common.add_argument("--top-n", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated N list")
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--events")
    common.add_argument("--snapshot")
    common.add_argument("--model")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="hsmmrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        files = COMMANDS[args.command](cfg)
        write_manifest(Path(cfg["paths"]["out"]), args.command, cfg, files)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
