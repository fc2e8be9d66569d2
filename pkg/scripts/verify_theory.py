#!/usr/bin/env python3
"""Run the tilt and transport property sweeps over several seeds and print the worst residuals."""
import argparse
import sys

import numpy as np

from gdi.theory import run_suite


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args(argv)

    ok = True
    for seed in range(args.seeds):
        s = run_suite(np.random.default_rng(seed))
        ok &= s["passed"]
        print(f"seed {seed}: coupling residual {s['coupling_max_marginal_residual']:.1e}  "
              f"down-mass {s['coupling_max_violating_mass']:.1e}  "
              f"tilt/target violations {s['tilt_violations']}/{s['superior_target_violations']}  "
              f"perf-diff residual {s['perf_diff_max_residual']:.1e}  {'ok' if s['passed'] else 'FAILED'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
