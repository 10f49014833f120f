#!/usr/bin/env python3
"""Run the four experiments from the checked-in configs and summarize.

    python scripts/run_experiments.py [--out reports] [name ...]
"""

import argparse
import sys
import time
from pathlib import Path

from vmmf.harness import EXPERIMENTS, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", default=sorted(EXPERIMENTS))
    ap.add_argument("--out", type=Path, default=ROOT / "reports")
    a = ap.parse_args()
    ok = True
    for name in a.names:
        t0 = time.perf_counter()
        rep = run_experiment(name, ROOT / "configs" / f"{name}.ini", a.out)
        print(f"{name}: {'PASS' if rep.passed else 'FAIL'} "
              f"({time.perf_counter() - t0:.0f} s)")
        for crit, c in rep.criteria.items():
            print(f"  {'ok  ' if c['passed'] else 'FAIL'} {crit}: {c['value']}")
        ok &= rep.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
