"""Command line entry point: ``fdpoison run | sweep | report``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import config as cfgmod
from .attacks import AttackKind
from .config import DatasetSpec, ExperimentConfig, Seeds
from .datasets import nearest_centroid_pair
from .errors import ConfigError, FDError
from .metrics import ConvergenceSeries, misleading_report, write_json, write_misleading_csv, write_series_csv
from .protocol import ExperimentResult, run_experiment

log = logging.getLogger("fdpoison")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SWEEP_AXES: dict[str, tuple] = {
    "ratio": (0.1, 0.2, 0.3),
    "alpha": (0.5, 1.0, 3.0),
    "clients": (20, 50, 200),
    "arch": ("homo", "hetero"),
}
ABLATION_RATIO = 0.2
ALL_ATTACKS = tuple(k.value for k in AttackKind)

# extra spellings for fields whose names are single capitals
_ALIASES = {"K": ["--clients"], "R": ["--neighbors"]}


# ---------------------------------------------------------------------------
# config flags
# ---------------------------------------------------------------------------

def _flag_specs():
    """(dest key, flag names, python type) for every config field."""
    specs = []
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("dataset", "seeds"):
            continue
        names = [f"--{f.name.replace('_', '-')}", *_ALIASES.get(f.name, [])]
        if f.name == "output_dir":
            names.append("--out")
        specs.append((f.name, names, str(f.type)))
    for f in dataclasses.fields(DatasetSpec):
        flag = "--dataset-kind" if f.name == "kind" else f"--{f.name.replace('_', '-')}"
        specs.append((f"dataset.{f.name}", [flag], str(f.type)))
    for f in dataclasses.fields(Seeds):
        specs.append((f"seeds.{f.name}", [f"--{f.name}-seed"], str(f.type)))
    return specs


def _py_type(ftype: str):
    base = ftype.replace(" | None", "").strip()
    return {"int": int, "float": float, "str": str}.get(base)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment configuration (override the --config file)")
    g.add_argument("--config", dest="config_path", help="JSON config file")
    for key, names, ftype in _flag_specs():
        if ftype.startswith("bool"):
            g.add_argument(*names, dest=key, action=argparse.BooleanOptionalAction,
                           default=argparse.SUPPRESS)
        elif key == "attack":
            g.add_argument(*names, dest=key, choices=ALL_ATTACKS, default=argparse.SUPPRESS)
        else:
            g.add_argument(*names, dest=key, type=_py_type(ftype), default=argparse.SUPPRESS,
                           metavar=key.split(".")[-1].upper())
    g.add_argument("--seed", dest="all_seeds", type=int, default=argparse.SUPPRESS,
                   help="set all four seed streams at once")


def parse_config(config_path: str | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load ``config_path`` (or defaults) and apply dotted-key overrides."""
    cfg = cfgmod.load_config(config_path) if config_path else ExperimentConfig().validate()
    return cfgmod.with_overrides(cfg, overrides or {})


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    ns = vars(args)
    overrides = {}
    if "all_seeds" in ns:
        for name in ("data", "attack", "model", "training"):
            overrides[f"seeds.{name}"] = ns["all_seeds"]
    for key, _, _ in _flag_specs():
        if key in ns:
            overrides[key] = ns[key]
    return parse_config(ns.get("config_path"), overrides)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _misleading_target(result: ExperimentResult) -> int:
    cfg = result.config
    if cfg.misleading_target is not None:
        if cfg.misleading_target >= result.world.n_classes:
            raise ConfigError("exceeds number of classes", field="misleading_target")
        return cfg.misleading_target
    return nearest_centroid_pair(result.world.train)[0]


def result_document(result: ExperimentResult):
    """JSON document plus the series and misleading report it was built from."""
    series = ConvergenceSeries.from_reports(result.reports)
    target = _misleading_target(result)
    report = misleading_report([c.net for c in result.world.clients], result.world.test, target)
    return {
        "config": result.config.to_dict(),
        "series": series.to_dict(),
        "summary": {**result.summary(), "convergence_round_95": series.first_round_reaching(0.95)},
        "misleading": [report.to_dict()],
        "losses": [
            [{"ce": l.ce, "kd": l.kd, "total": l.total} for l in r.losses] for r in result.reports
        ],
        "diverged": [r.diverged for r in result.reports],
    }, series, report


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None, quiet: bool = False) -> dict:
    """Execute one experiment and write ``series.csv``, ``misleading.csv``, ``result.json``."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    progress = None
    if not quiet:
        def progress(rep):
            log.info("round %3d  mean_acc=%.4f", rep.round, rep.mean_accuracy)
    result = run_experiment(cfg, progress=progress)
    doc, series, report = result_document(result)
    write_series_csv(series, out / "series.csv")
    write_misleading_csv(report, out / "misleading.csv")
    write_json(doc, out / "result.json")
    return doc


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _cell_overrides(axis: str, value) -> dict[str, Any]:
    if axis == "ratio":
        return {"poison_ratio": float(value)}
    if axis == "alpha":
        return {"alpha": float(value)}
    if axis == "clients":
        return {"K": int(value)}
    if axis == "arch":
        if value not in ("homo", "hetero"):
            raise ConfigError(f"arch values are homo|hetero, got {value!r}", field="values")
        return {"heterogeneous_models": value == "hetero"}
    raise ConfigError(f"unknown sweep axis {axis!r}", field="axis")


def _parse_value(axis: str, text: str):
    if axis == "arch":
        return text
    try:
        return int(text) if axis == "clients" else float(text)
    except ValueError:
        raise ConfigError(f"bad {axis} value {text!r}", field="values") from None


def _run_cell(job):
    cfg_dict, out_dir = job
    cfg = cfgmod.config_from_dict(cfg_dict)
    doc = run(cfg, out_dir, quiet=True)
    return doc["summary"]["final_mean_acc"]


def _label(axis: str, value) -> str:
    return f"{axis}={value}"


def sweep(base: ExperimentConfig, axis: str, attacks: Sequence[str] | None = None,
          values: Sequence | None = None, out_dir: str | Path | None = None, jobs: int = 1) -> Path:
    """Run every (axis value, attack) cell with the base seeds and write a summary.

    Non-ratio axes use a 20% poisoning ratio when the base config leaves it
    at 0, so the attack columns are meaningful.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected {'|'.join(SWEEP_AXES)}", field="axis")
    attacks = [AttackKind.parse(a).value for a in (attacks or ALL_ATTACKS)]
    values = list(values or SWEEP_AXES[axis])
    root = Path(out_dir or base.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    base_dict = base.to_dict()
    if axis != "ratio" and base.poison_ratio == 0.0:
        base_dict["poison_ratio"] = ABLATION_RATIO
    cells, jobs_list = [], []
    for value in values:
        for attack in attacks:
            d = json.loads(json.dumps(base_dict))
            d.update(_cell_overrides(axis, value))
            d["attack"] = attack
            cell_dir = root / _label(axis, value) / attack
            d["output_dir"] = str(cell_dir)
            cfgmod.config_from_dict(d)
            cells.append({"value": value, "attack": attack, "path": str(cell_dir.relative_to(root))})
            jobs_list.append((d, str(cell_dir)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_run_cell, jobs_list))
    else:
        accs = []
        for job, cell in zip(jobs_list, cells):
            log.info("cell %s / %s", _label(axis, cell["value"]), cell["attack"])
            accs.append(_run_cell(job))
    for cell, acc in zip(cells, accs):
        cell["final_mean_acc"] = acc
    write_json({"axis": axis, "values": values, "attacks": attacks, "cells": cells}, root / "sweep.json")
    write_summary(root)
    return root


def _marks(column: dict[str, float]) -> dict[str, str]:
    """``lowest`` / ``second`` among poisoned rows (the no-attack row is excluded)."""
    ranked = sorted((v, a) for a, v in column.items() if a != "none")
    marks = {a: "" for a in column}
    if ranked:
        marks[ranked[0][1]] = "lowest"
    if len(ranked) > 1:
        marks[ranked[1][1]] = "second"
    return marks


def summary_table(sweep_doc: dict) -> tuple[list[str], list[list]]:
    axis, values, attacks = sweep_doc["axis"], sweep_doc["values"], sweep_doc["attacks"]
    acc = {(c["attack"], json.dumps(c["value"])): c["final_mean_acc"] for c in sweep_doc["cells"]}
    columns = [_label(axis, v) for v in values] + ["avg"]
    table = {a: {} for a in attacks}
    for a in attacks:
        vals = [acc[(a, json.dumps(v))] for v in values]
        for col, v in zip(columns, vals):
            table[a][col] = v
        table[a]["avg"] = sum(vals) / len(vals)
    marks = {col: _marks({a: table[a][col] for a in attacks}) for col in columns}
    header = ["attack"]
    for col in columns:
        header += [col, f"{col}_mark"]
    rows = []
    for a in attacks:
        row = [a]
        for col in columns:
            row += [repr(float(table[a][col])), marks[col][a]]
        rows.append(row)
    return header, rows


def write_summary(sweep_root: Path) -> Path:
    doc = json.loads((Path(sweep_root) / "sweep.json").read_text())
    header, rows = summary_table(doc)
    path = Path(sweep_root) / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def report(dirs: Sequence[str | Path]) -> list[str]:
    """Re-summarize existing output directories (single runs or sweeps)."""
    lines = []
    for d in map(Path, dirs):
        if (d / "sweep.json").exists():
            doc = json.loads((d / "sweep.json").read_text())
            for cell in doc["cells"]:
                res = json.loads((d / cell["path"] / "result.json").read_text())
                cell["final_mean_acc"] = res["summary"]["final_mean_acc"]
            write_json(doc, d / "sweep.json")
            path = write_summary(d)
            header, rows = summary_table(doc)
            lines.append(f"{d}: sweep over {doc['axis']} -> {path}")
            lines.append("  " + " ".join(h for h in header if not h.endswith("_mark")))
            for row in rows:
                vals = row[1::2]
                marks = row[2::2]
                cells = [f"{float(v):.4f}{'*' if m == 'lowest' else '_' if m == 'second' else ''}"
                         for v, m in zip(vals, marks)]
                lines.append(f"  {row[0]} " + " ".join(cells))
        elif (d / "result.json").exists():
            res = json.loads((d / "result.json").read_text())
            s, c = res["summary"], res["config"]
            lines.append(
                f"{d}: protocol={c['protocol']} attack={c['attack']} ratio={c['poison_ratio']} "
                f"rounds={s['rounds']} final_mean_acc={s['final_mean_acc']:.4f}"
            )
        else:
            raise FDError(f"{d} has neither result.json nor sweep.json")
    return lines


# ---------------------------------------------------------------------------
# argparse plumbing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="fdpoison", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment", parents=[common])
    add_config_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="run an ablation grid", parents=[common])
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p_sweep.add_argument("--attacks", default=",".join(ALL_ATTACKS),
                         help="comma-separated subset of none,fdla,random,zero")
    p_sweep.add_argument("--values", default=None, help="comma-separated axis values")
    p_sweep.add_argument("--jobs", type=int, default=1)
    add_config_flags(p_sweep)

    p_rep = sub.add_parser("report", help="re-summarize output directories",
                           parents=[common])
    p_rep.add_argument("dirs", nargs="+")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = config_from_args(args)
            doc = run(cfg, quiet=not args.verbose)
            s = doc["summary"]
            print(f"final mean accuracy {s['final_mean_acc']:.4f} -> {cfg.output_dir}")
        elif args.command == "sweep":
            cfg = config_from_args(args)
            values = None
            if args.values:
                values = [_parse_value(args.axis, v.strip()) for v in args.values.split(",")]
            attacks = [a.strip() for a in args.attacks.split(",") if a.strip()]
            root = sweep(cfg, args.axis, attacks, values, jobs=args.jobs)
            print("\n".join(report([root])))
        else:
            print("\n".join(report(args.dirs)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
