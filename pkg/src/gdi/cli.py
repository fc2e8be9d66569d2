"""Command-line entry point: ``gdi {train,ablate,verify-theory,metrics,report}``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import metrics, theory
from .orchestrator import load_config, run_gdi, state_coverage, with_overrides

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ABLATION_MODES = ("gdi_i3", "gdi_i1", "fixed_lambda")
SEED_ENV = "GDI_SEED"

log = logging.getLogger("gdi")


class ValidationError(Exception):
    pass


def _seed_override(seed: Optional[int]) -> Optional[int]:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load(path) -> tuple:
    try:
        return load_config(path)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ValidationError(f"bad config {path}: {exc}") from exc


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ValidationError(f"output directory {out} is not writable")
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_train(config_path, seed: Optional[int], outdir) -> int:
    cfg, _ = _load(config_path)
    seed = _seed_override(seed)
    if seed is not None:
        cfg = with_overrides(cfg, seed=seed)
    out = _outdir(outdir)
    run = run_gdi(cfg)
    run.to_csv(out / "training_log.csv")
    summary = run.summary()
    summary.update({"mode": cfg.mode, "seed": cfg.seed})
    _write_json(out / "summary.json", summary)
    log.info("train: %d frames, %d episodes, final return %.4f",
             summary["frames"], summary["episodes"], summary["final_mean_return"])
    return EXIT_OK


def cmd_ablate(config_path, outdir, seed: Optional[int] = None) -> int:
    cfg, seeds = _load(config_path)
    seed = _seed_override(seed)
    if seed is not None:
        seeds = [seed]
    out = _outdir(outdir)
    rows = []
    for mode in ABLATION_MODES:
        returns, coverage = [], []
        for s in seeds:
            run = run_gdi(with_overrides(cfg, mode=mode, seed=s))
            returns.append(run.final_window_return())
            coverage.append(state_coverage(run))
        rows.append({"mode": mode, "seeds": len(seeds), "mean_return": float(np.mean(returns)),
                     "median_coverage": float(np.median(coverage))})
    base = rows[0]["mean_return"]
    for r in rows:
        r["normalized_return"] = r["mean_return"] / base if base != 0 else float("nan")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def cmd_verify_theory(outdir, seed: Optional[int] = None, coupling_fn=None) -> int:
    out = _outdir(outdir)
    seed = _seed_override(seed)
    stats = theory.run_suite(np.random.default_rng(0 if seed is None else seed), coupling_fn=coupling_fn)
    _write_json(out / "theory_report.json", stats)
    return EXIT_OK if stats["passed"] else EXIT_INVALID


def cmd_metrics(score_csv, outdir) -> int:
    try:
        table = metrics.load_score_table(score_csv)
    except (OSError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    out = _outdir(outdir)
    summary = metrics.write_report(table, out / "metrics.csv")
    _write_json(out / "metrics_summary.json", summary)
    return EXIT_OK


def cmd_report(run_dirs: List[str], outdir) -> int:
    if not run_dirs:
        raise ValidationError("report needs at least one run directory")
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read {path}: {exc}") from exc
        rows.append({"run": str(d), **{k: v for k, v in data.items() if not isinstance(v, (dict, list))}})
    fields = list(dict.fromkeys(k for r in rows for k in r))
    out = _outdir(outdir)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training job")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/train")

    a = sub.add_parser("ablate", help="compare gdi_i3, gdi_i1 and fixed_lambda over the config's seeds")
    a.add_argument("config")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", default="runs/ablate")

    v = sub.add_parser("verify-theory", help="run the transport and tilt property sweeps")
    v.add_argument("--seed", type=int)
    v.add_argument("--out", default="runs/theory")

    m = sub.add_parser("metrics", help="normalized scores for a score table")
    m.add_argument("scores", nargs="?", default=None, help="CSV path (default: bundled gdi_h3 table)")
    m.add_argument("--out", default="runs/metrics")

    r = sub.add_parser("report", help="merge run summaries into one CSV")
    r.add_argument("runs", nargs="*")
    r.add_argument("--out", default="runs/report")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.seed, args.out)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out, args.seed)
        if args.command == "verify-theory":
            return cmd_verify_theory(args.out, args.seed)
        if args.command == "metrics":
            return cmd_metrics(args.scores or metrics.bundled_table_path("gdi_h3"), args.out)
        return cmd_report(args.runs, args.out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
