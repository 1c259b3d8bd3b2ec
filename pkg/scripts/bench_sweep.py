"""Stored-correlation vs dense-equivalent sweep over coarse grid sizes.

    python3 scripts/bench_sweep.py --sizes 4 6 8 10
"""

import argparse
import sys

from dualrc import harness as H
from dualrc.config import resolve


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--sizes", type=int, nargs="+", default=[4, 6, 8])
    args = p.parse_args()
    report = H.bench(resolve(args.config), args.sizes)
    sys.stdout.write(report.to_text())
    sys.stdout.write(report.timings_text())
    for f in report.failures:
        print(f"FAIL {f}", file=sys.stderr)
    return 0 if report.ok else 3


if __name__ == "__main__":
    sys.exit(main())
