"""Command-line entry point: ``mbsfl run | compare | check | estimate-constants``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from itertools import combinations
from pathlib import Path

import numpy as np

from .checks import CHECKS, INJECTIONS, run_checks
from .data import estimate_constants
from .exceptions import ConfigError, FormatError, MBSFLError
from .experiment import atomic_write, build_cell_data, canonical_json, config_hash, output_dir, parse_config, run_sweep
from .nn import DenseNet, init_model

log = logging.getLogger("mbsfl")


def _add_config_args(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set schedule.mode=diminishing (repeatable)")


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    out = output_dir(cfg, args.out)
    print(f"# resolved config ({config_hash(cfg)}): {canonical_json(cfg.to_dict())}")
    t0 = time.time()
    summary = run_sweep(cfg, out, args.workers)
    failed = [c for c in summary["cells"] if c["status"] != "ok"]
    log.info("%d cells in %.1fs -> %s", len(summary["cells"]), time.time() - t0, out)
    for c in failed:
        print(f"cell {c['file']}: {c['status']}: {c['error']}", file=sys.stderr)
    print(f"wrote {len(summary['cells']) - len(failed)} run logs and summary.json to {out}")
    return 1 if failed else 0


# ---------------------------------------------------------------- compare

def _series(summaries: list) -> dict:
    """Map a display label to {(r, cut_layer, seed): (loss, accuracy)} for every summary/algorithm pair."""
    raw = []
    for k, (path, summary) in enumerate(summaries):
        algos = dict.fromkeys(c["algorithm"] for c in summary["cells"])
        for a in algos:
            cells = {(c["r"], c["cut_layer"], c["seed"]): (c["final_loss"], c["final_accuracy"])
                     for c in summary["cells"] if c["algorithm"] == a and c["status"] == "ok"}
            raw.append((k, Path(path).stem, a, cells))
    labels = [a for _, _, a, _ in raw]
    out = {}
    for k, stem, a, cells in raw:
        label = a if labels.count(a) == 1 else f"{k}:{stem}:{a}"
        out[label] = cells
    return out


def _trend(values) -> str:
    v = [x for x in values if x is not None]
    if len(v) < 2:
        return "n/a"
    d = np.diff(v)
    if np.all(d == 0):
        return "constant"
    if np.all(d >= 0):
        return "non-decreasing"
    if np.all(d <= 0):
        return "non-increasing"
    return "mixed"


def _stat(values):
    v = [x for x in values if x is not None]
    if not v:
        return None, None
    return float(np.mean(v)), float(np.std(v))


def compare_summaries(summaries: list) -> dict:
    """Seed statistics per cell, pairwise win counts and accuracy trends (population std)."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two summaries")
    series = _series(summaries)
    keys = None
    for label, cells in series.items():
        if keys is None:
            keys = set(cells)
        elif set(cells) != keys:
            raise ValueError(f"mismatched cells: {label} covers {sorted(set(cells) ^ keys)} differently")
    grid = sorted({(r, lc) for r, lc, _ in keys})
    seeds = sorted({s for _, _, s in keys})
    cells = []
    for r, lc in grid:
        stats = {}
        for label, data in series.items():
            lm, ls = _stat([data[(r, lc, s)][0] for s in seeds])
            am, as_ = _stat([data[(r, lc, s)][1] for s in seeds])
            stats[label] = {"loss_mean": lm, "loss_std": ls, "accuracy_mean": am, "accuracy_std": as_,
                            "n": len(seeds)}
        cells.append({"r": r, "cut_layer": lc, "stats": stats})
    pairs = []
    for a, b in combinations(series, 2):
        wins_a = wins_b = ties = 0
        dl, da = [], []
        for key in sorted(keys):
            la, lb = series[a][key][0], series[b][key][0]
            wins_a += la < lb
            wins_b += lb < la
            ties += la == lb
            dl.append(la - lb)
            if series[a][key][1] is not None and series[b][key][1] is not None:
                da.append(series[a][key][1] - series[b][key][1])
        pairs.append({"a": a, "b": b, "wins_a": int(wins_a), "wins_b": int(wins_b), "ties": int(ties),
                      "mean_loss_delta": float(np.mean(dl)), "mean_accuracy_delta": float(np.mean(da)) if da else None})
    rs = sorted({r for r, _ in grid})
    lcs = sorted({lc for _, lc in grid})
    mono = {}
    for label in series:
        acc = {(c["r"], c["cut_layer"]): c["stats"][label]["accuracy_mean"] for c in cells}
        mono[label] = {
            "accuracy_vs_r": {str(lc): _trend([acc.get((r, lc)) for r in rs]) for lc in lcs},
            "accuracy_vs_cut_layer": {str(r): _trend([acc.get((r, lc)) for lc in lcs]) for r in rs},
        }
    return {"series": list(series), "seeds": seeds, "cells": cells, "pairs": pairs, "monotonicity": mono}


def _fmt_ms(m, s):
    return "-" if m is None else f"{m:.4f}±{s:.4f}"


def comparison_table(result: dict) -> str:
    lines = []
    labels = result["series"]
    lines.append("r      L_c  " + "  ".join(f"{lab:>34}" for lab in labels))
    for c in result["cells"]:
        vals = "  ".join(f"{_fmt_ms(c['stats'][l]['loss_mean'], c['stats'][l]['loss_std']):>16} "
                         f"{_fmt_ms(c['stats'][l]['accuracy_mean'], c['stats'][l]['accuracy_std']):>17}"
                         for l in labels)
        lines.append(f"{c['r']:<6g} {c['cut_layer']:<4d} {vals}")
    lines.append("")
    for p in result["pairs"]:
        lines.append(f"{p['a']} vs {p['b']}: lower loss {p['wins_a']}/{p['wins_b']} (ties {p['ties']}), "
                     f"mean loss delta {p['mean_loss_delta']:+.6f}")
    for label, m in result["monotonicity"].items():
        lines.append(f"{label}: accuracy vs r {m['accuracy_vs_r']}, vs L_c {m['accuracy_vs_cut_layer']}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    summaries = []
    for path in args.summaries:
        try:
            summaries.append((path, json.loads(Path(path).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
    result = compare_summaries(summaries)
    print(comparison_table(result))
    if args.json:
        atomic_write(args.json, json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- check / estimate-constants

def cmd_check(args) -> int:
    results = run_checks(args.only, args.inject)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} [{r.module}, tol {r.tolerance}] {r.detail}")
    report = {"passed": all(r.passed for r in results), "checks": [r.to_dict() for r in results]}
    if args.report:
        atomic_write(args.report, json.dumps(report, indent=2) + "\n")
    return 0 if report["passed"] else 1


def cmd_estimate_constants(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    rows = []
    for r in cfg.r_values:
        for seed in cfg.seeds:
            data = build_cell_data(cfg, r, seed)
            model = data.initial_model if data.initial_model is not None else init_model(data.specs, seed)
            est = estimate_constants(data.dataset, data.shards, model, data.net or DenseNet(), args.probes, seed,
                                     cfg.batch_size, args.radius)
            rows.append({"r": r, "seed": seed, **est.to_dict()})
            print(f"r={r:g} seed={seed}: R_hat={est.R_hat:.6g} delta_hat={est.delta_hat:.6g} "
                  f"max sigma_n={float(np.max(est.sigma_n)):.6g}")
    if args.json:
        atomic_write(args.json, json.dumps({"config_hash": config_hash(cfg), "estimates": rows}, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbsfl", description="MiniBatch split federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a sweep and write CSV run logs plus summary.json")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: config output_dir, $MBSFL_OUTPUT_DIR, ./runs)")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare two or more summary.json files")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--json", help="write the comparison as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check", help="run the invariant and oracle suite")
    p.add_argument("--only", action="append", choices=list(CHECKS), help="restrict to a check group (repeatable)")
    p.add_argument("--inject", choices=INJECTIONS, help="negative control: inject a fault")
    p.add_argument("--report", help="write a JSON report")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("estimate-constants", help="probe-based estimates of sigma_n, R and delta")
    _add_config_args(p)
    p.add_argument("--probes", type=int, default=5)
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--json", help="write estimates as JSON")
    p.set_defaults(func=cmd_estimate_constants)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MBSFLError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
