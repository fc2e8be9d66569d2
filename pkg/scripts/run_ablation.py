#!/usr/bin/env python3
"""Paired-seed ablation on the chain environment.

Runs gdi_i3, gdi_i1 and fixed_lambda for every seed in the config and prints the
per-seed final-window return and state coverage, then the group summary.

    python3 scripts/run_ablation.py configs/chain_ablation.json --seeds 5
"""
import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from gdi.orchestrator import load_config, run_gdi, state_coverage, with_overrides

MODES = ("gdi_i3", "gdi_i1", "fixed_lambda")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_cfg = Path(__file__).resolve().parents[1] / "configs" / "chain_ablation.json"
    p.add_argument("config", nargs="?", default=str(default_cfg))
    p.add_argument("--seeds", type=int, default=None, help="use only the first N seeds")
    p.add_argument("--frames", type=int, default=None, help="override total_frames")
    p.add_argument("--csv", default=None, help="write per-seed rows here")
    args = p.parse_args(argv)

    cfg, seeds = load_config(args.config)
    if args.seeds is not None:
        seeds = seeds[:args.seeds]
    if args.frames is not None:
        cfg = with_overrides(cfg, total_frames=args.frames)

    rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        for mode in MODES:
            log = run_gdi(with_overrides(cfg, mode=mode, seed=seed))
            rows.append(dict(seed=seed, mode=mode, final_return=log.final_window_return(),
                             coverage=state_coverage(log), episodes=len(log.episodes)))
            print(f"seed {seed:3d} {mode:13s} return {rows[-1]['final_return']:8.3f} "
                  f"coverage {rows[-1]['coverage']:.3f}", flush=True)

    print(f"\n{'mode':13s} {'mean return':>12s} {'median cov':>11s}")
    means = {m: np.mean([x["final_return"] for x in rows if x["mode"] == m]) for m in MODES}
    for mode in MODES:
        cov = np.median([x["coverage"] for x in rows if x["mode"] == mode])
        print(f"{mode:13s} {means[mode]:12.3f} {cov:11.3f}   normalized {means[mode] / means[MODES[0]]:.3f}")
    print(f"{len(seeds)} seeds in {time.perf_counter() - t0:.0f} s")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
