"""MMA curve of the full pipeline on seeded synthetic pairs.

    python3 scripts/run_synthetic_mma.py --seeds 0 1 2 --set warp=homography
"""

import argparse

import numpy as np

from dualrc import harness as H
from dualrc.cli import _overrides
from dualrc.config import resolve


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = p.parse_args()
    base = resolve(args.config, _overrides(args.set))

    curves = []
    for seed in args.seeds:
        cfg = base.with_overrides({"seed": str(seed)})
        res = H.run_scene(H.make_scene(cfg), cfg)
        curves.append(res.curve.values)
        print(f"seed {seed}: {len(res.all_matches)} matches, "
              + " ".join(f"@{t:g}={v:.3f}" for t, v in zip(res.curve.thresholds, res.curve.values)))
    mean = np.mean(curves, axis=0)
    print("mean:  " + " ".join(f"@{t:g}={v:.3f}" for t, v in zip(base.threshold_list(), mean)))


if __name__ == "__main__":
    main()
