"""Command-line entry point: single runs, experiment suites, gradient checks.

Suite layout on disk: <out>/<suite>/<cell>/<seed>/report.json plus one
<out>/<suite>/aggregate.csv with mean and std over seeds per cell.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from . import gradcheck
from .errors import ConfigError
from .report import emit_classwise_csv, emit_report, load_report
from .trainer import run

SUITES = ("baseline_vs_ours", "alpha_sweep", "criteria_compare", "ablation")

ALPHA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)

# Flag rows of the ablation: (nam, gr, ws, gda).
ABLATION_ROWS = (
    ("none", (False, False, False, False)),
    ("nam", (True, False, False, False)),
    ("nam_gr", (True, True, False, False)),
    ("nam_ws", (True, False, True, False)),
    ("nam_gr_ws", (True, True, True, False)),
    ("nam_gr_ws_gda", (True, True, True, True)),
)

FLAG_KEYS = ("nam", "gr", "ws", "gda")


def _default_out() -> str:
    return os.environ.get("PLASTICNET_OUT", "runs")


def _add_schema_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config keys (override file/defaults)")
    for key, spec in cfgmod.SCHEMA.items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}",
                           metavar="V", help=f"{spec.help} (default {spec.default!r})")
    group.add_argument("--flags", metavar="LIST",
                       help="shorthand: comma list of enabled flags among nam,gr,ws,gda;"
                            " the rest are disabled")


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for key in cfgmod.SCHEMA:
        raw = getattr(args, f"key_{key}", None)
        if raw is not None:
            overrides[key] = cfgmod.parse_value(key, raw)
    if getattr(args, "flags", None) is not None:
        enabled = {tok.strip() for tok in args.flags.split(",") if tok.strip()}
        unknown = enabled - set(FLAG_KEYS)
        if unknown:
            raise ConfigError(f"unknown flags: {sorted(unknown)}")
        for key in FLAG_KEYS:
            overrides[key] = key in enabled
    return overrides


def _resolved_values(args: argparse.Namespace) -> dict:
    file_values = cfgmod.parse_config_file(args.config) if args.config else None
    return cfgmod.resolve(file_values, _collect_overrides(args))


def _run_one(values: dict, out_dir: str) -> dict:
    """Execute one training run and write report.json + classwise.csv."""
    os.makedirs(out_dir, exist_ok=True)
    train_cfg = cfgmod.make_train_config(values)
    dataset = cfgmod.make_dataset(values)
    report = run(train_cfg, dataset, config_echo=dict(sorted(values.items())))
    emit_report(report, os.path.join(out_dir, "report.json"))
    emit_classwise_csv(report, os.path.join(out_dir, "classwise.csv"))
    return report.to_dict()


def cmd_train(args: argparse.Namespace) -> int:
    try:
        values = _resolved_values(args)
        blob = _run_one(values, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    metrics = blob["metrics"]
    groups = metrics["groups"]
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"overall {metrics['overall_accuracy']:.4f}  "
          f"many {fmt(groups['many'])}  medium {fmt(groups['medium'])}  "
          f"few {fmt(groups['few'])}  events {len(blob['events'])}")
    print(f"report: {os.path.join(args.out, 'report.json')}")
    return 0


def _suite_cells(suite: str, base: dict) -> list[tuple[str, dict]]:
    cells: list[tuple[str, dict]] = []
    if suite == "baseline_vs_ours":
        off = {k: False for k in FLAG_KEYS}
        on = {k: True for k in FLAG_KEYS}
        cells = [("baseline", off), ("ours", on)]
    elif suite == "alpha_sweep":
        cells = [(f"alpha_{a}", {"alpha": a}) for a in ALPHA_GRID]
    elif suite == "criteria_compare":
        cells = [(crit, {"criterion": crit}) for crit in
                 ("accumulated_gradient", "final_batch_gradient", "l1_norm", "random")]
    elif suite == "ablation":
        cells = [(name, dict(zip(FLAG_KEYS, flags))) for name, flags in ABLATION_ROWS]
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    out = []
    for name, patch in cells:
        values = dict(base)
        values.update(patch)
        out.append((name, values))
    return out


def _suite_worker(job: tuple[str, int, dict, str]) -> tuple[str, int, str]:
    cell, seed, values, out_dir = job
    try:
        _run_one(values, out_dir)
        return cell, seed, ""
    except Exception:
        return cell, seed, traceback.format_exc(limit=2).strip().splitlines()[-1]


def _aggregate_rows(suite_dir: str, cells: list[str], seeds: list[int],
                    failures: dict) -> list[str]:
    rows = ["cell,n_seeds,overall_mean,overall_std,mean_class_mean,"
            "many_mean,medium_mean,few_mean,status"]

    def col(vals):
        vals = [v for v in vals if v is not None]
        return repr(float(np.mean(vals))) if vals else ""

    for cell in cells:
        reports = []
        for seed in seeds:
            if (cell, seed) in failures:
                continue
            reports.append(load_report(
                os.path.join(suite_dir, cell, str(seed), "report.json")))
        status = "ok" if len(reports) == len(seeds) else \
            f"failed:{len(seeds) - len(reports)}"
        if not reports:
            rows.append(f"{cell},0,,,,,,,{status}")
            continue
        overall = [r.overall_accuracy for r in reports]
        rows.append(",".join([
            cell, str(len(reports)),
            repr(float(np.mean(overall))), repr(float(np.std(overall))),
            col([r.mean_class_accuracy for r in reports]),
            col([r.groups.get("many") for r in reports]),
            col([r.groups.get("medium") for r in reports]),
            col([r.groups.get("few") for r in reports]),
            status,
        ]))
    return rows


def cmd_suite(args: argparse.Namespace) -> int:
    try:
        base = _resolved_values(args)
        seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip() != ""]
        if not seeds:
            raise ConfigError("suite needs a non-empty seed list")
        cells = _suite_cells(args.suite, base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    suite_dir = os.path.join(args.out, args.suite)
    jobs = []
    for cell, values in cells:
        for seed in seeds:
            v = dict(values)
            v["seed"] = seed
            jobs.append((cell, seed, v, os.path.join(suite_dir, cell, str(seed))))

    failures: dict[tuple[str, int], str] = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for cell, seed, err in pool.map(_suite_worker, jobs):
                if err:
                    failures[(cell, seed)] = err
    else:
        for job in jobs:
            cell, seed, err = _suite_worker(job)
            if err:
                failures[(cell, seed)] = err

    for (cell, seed), err in sorted(failures.items()):
        print(f"cell {cell} seed {seed} failed: {err}", file=sys.stderr)
    rows = _aggregate_rows(suite_dir, [c for c, _ in cells], seeds, failures)
    os.makedirs(suite_dir, exist_ok=True)
    with open(os.path.join(suite_dir, "aggregate.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"aggregate: {os.path.join(suite_dir, 'aggregate.csv')}")
    return 1 if failures else 0


def cmd_gradcheck(_args: argparse.Namespace) -> int:
    worst_name, worst = "", 0.0
    ok = True
    for name, fn in gradcheck.CHECKS.items():
        err = fn()
        passed = err < gradcheck.FD_TOL
        ok = ok and passed
        if err > worst:
            worst_name, worst = name, err
        print(f"{name:24s} max_rel_err={err:.3e}  {'ok' if passed else 'FAIL'}")
    print(f"worst: {worst_name} at {worst:.3e} (threshold {gradcheck.FD_TOL:.0e})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plasticnet",
        description="Train networks that grow and prune neurons during training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--out", default=_default_out(),
                         help="output directory (env PLASTICNET_OUT)")
    _add_schema_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_suite = sub.add_parser("suite", help="run an experiment suite")
    p_suite.add_argument("--suite", required=True, choices=SUITES)
    p_suite.add_argument("--config", help="base config file")
    p_suite.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    p_suite.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_suite.add_argument("--out", default=_default_out(),
                         help="output root (env PLASTICNET_OUT)")
    _add_schema_flags(p_suite)
    p_suite.set_defaults(fn=cmd_suite)

    p_check = sub.add_parser("gradcheck",
                             help="finite-difference check of every op")
    p_check.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
