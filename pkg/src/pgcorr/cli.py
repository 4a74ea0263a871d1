"""Command line: ``pgcorr run <config.json>`` and ``pgcorr compare <dirA> <dirB>``.

Exit status 0 on success, 2 for configuration or usage errors (including
incomparable runs and missing files), 3 when a numerical failure aborts a
run.  A failed run keeps the artifacts written so far plus a ``FAILED``
marker holding the error message.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import subprocess
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .config import apply_override, config_hash, environment_hash, parse_value, validate
from .errors import ConfigError, NumericalError
from .experiments import run_scenario
from .io import ARROW_HEADER, arrow_rows, read_csv, save_checkpoint, write_csv

OUTPUT_ROOT_ENV = "PGCORR_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


def load_config(path: str, overrides=(), seed=None) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        apply_override(raw, key.strip(), parse_value(value))
    if seed is not None:
        raw["seeds"] = [seed]
    return validate(raw)


def output_directory(cfg: dict, out) -> Path:
    if out:
        return Path(out)
    if cfg["output_dir"]:
        return Path(cfg["output_dir"])
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg['scenario']}-{cfg['model']}-{config_hash(cfg)[:12]}"


def execute(cfg: dict, out_dir: Path) -> int:
    """Run every configured seed and write the artifacts into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "FAILED").unlink(missing_ok=True)
    manifest = {
        "scenario": cfg["scenario"],
        "model": cfg["model"],
        "seeds": cfg["seeds"],
        "config_hash": config_hash(cfg),
        "environment_hash": environment_hash(cfg),
        "git_describe": git_describe(),
        "package_version": __version__,
        "status": "running",
    }
    _write_json(out_dir / "config.json", cfg)
    _write_json(out_dir / "manifest.json", manifest)

    tables: dict = defaultdict(lambda: [None, []])
    summary, arrows = [], []
    status = EXIT_OK
    try:
        for seed in cfg["seeds"]:
            res = run_scenario(cfg, seed)
            for stem, (header, rows) in res.tables.items():
                tables[stem][0] = header
                tables[stem][1].extend(rows)
            summary.extend([seed, key, metric, value] for key, metric, value in res.summary)
            if res.policy is not None:
                arrows.append((seed, res.policy, res.positions))
            if res.checkpoints:
                (out_dir / "checkpoints").mkdir(exist_ok=True)
                for name, (hyper, post, trace) in res.checkpoints.items():
                    save_checkpoint(out_dir / "checkpoints" / f"seed{seed}_{name}.json", hyper, post, trace)
    except NumericalError as exc:
        (out_dir / "FAILED").write_text(f"numerical error: {exc}\n", encoding="utf-8", newline="\n")
        print(f"numerical error: {exc}", file=sys.stderr)
        status = EXIT_NUMERICAL
    for stem, (header, rows) in tables.items():
        write_csv(out_dir / f"{stem}.csv", header, rows)
    write_csv(out_dir / "summary.csv", ["seed", "key", "metric", "value"], summary)
    if arrows:
        rows = [r for seed, policy, pos in arrows for r in arrow_rows(seed, policy, pos)]
        write_csv(out_dir / "arrows.csv", ARROW_HEADER, rows)
    manifest["status"] = "complete" if status == EXIT_OK else "failed"
    _write_json(out_dir / "manifest.json", manifest)
    return status


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"manifest file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _read_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.csv"
    if not path.is_file():
        raise ConfigError(f"metric file not found: {path}")
    header, rows = read_csv(path)
    if header != ["seed", "key", "metric", "value"]:
        raise ConfigError(f"{path}: unexpected header {header}")
    return {(int(r[0]), r[1], r[2]): float(r[3]) for r in rows}


def compare_runs(dir_a, dir_b) -> list:
    """Paired per-seed deltas ``a - b`` for every shared (key, metric).

    Returns rows ``[key, metric, n_pairs, mean_delta, median_delta,
    n_negative, n_positive, n_zero, sign_test_p]``; the sign test is the
    two-sided binomial test on the nonzero deltas.  Pairs where both values
    are infinite count as ties and are left out of the mean and median.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    ma, mb = _read_manifest(dir_a), _read_manifest(dir_b)
    if ma["scenario"] != mb["scenario"]:
        raise ConfigError(f"scenario mismatch: {ma['scenario']!r} vs {mb['scenario']!r}")
    if ma["environment_hash"] != mb["environment_hash"]:
        raise ConfigError("environment mismatch: the runs used different environment or scenario parameters")
    sa, sb = _read_summary(dir_a), _read_summary(dir_b)
    groups: dict = defaultdict(list)
    for (seed, key, metric), va in sa.items():
        if (seed, key, metric) in sb:
            groups[(key, metric)].append((va, sb[(seed, key, metric)]))
    if not groups:
        raise ConfigError("the runs share no seeds")
    out = []
    for (key, metric), pairs in groups.items():
        signs = [(a > b) - (a < b) for a, b in pairs]
        deltas = [a - b for a, b in pairs if not (math.isinf(a) and math.isinf(b) and a == b)]
        finite = [d for d in deltas if math.isfinite(d)]
        neg, pos = signs.count(-1), signs.count(1)
        p = binomtest(neg, neg + pos, 0.5).pvalue if neg + pos else 1.0
        mean = float(np.mean(finite)) if finite else float("nan")
        med = float(np.median(deltas)) if deltas else 0.0
        out.append([key, metric, len(pairs), mean, med, neg, pos, signs.count(0), float(p)])
    return out


COMPARE_HEADER = [
    "key",
    "metric",
    "n_pairs",
    "mean_delta",
    "median_delta",
    "n_negative",
    "n_positive",
    "n_zero",
    "sign_test_p",
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgcorr", description="Correlated multinomial models for decision making")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="run only this seed")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key by dotted path, e.g. kernel.theta=2.0",
    )
    cmp = sub.add_parser("compare", help="paired comparison of two run directories")
    cmp.add_argument("dir_a")
    cmp.add_argument("dir_b")
    cmp.add_argument("--out", default=None, help="also write the table to this CSV file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "run":
            if args.seed is not None and args.seed < 0:
                raise ConfigError("seed: must be nonnegative")
            cfg = load_config(args.config, args.set, args.seed)
            out_dir = output_directory(cfg, args.out)
            status = execute(cfg, out_dir)
            if status == EXIT_OK:
                print(f"wrote {out_dir}")
            return status
        rows = compare_runs(args.dir_a, args.dir_b)
        if args.out:
            write_csv(args.out, COMPARE_HEADER, rows)
        print(",".join(COMPARE_HEADER))
        for r in rows:
            print(",".join(repr(v) if isinstance(v, float) else str(v) for v in r))
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
