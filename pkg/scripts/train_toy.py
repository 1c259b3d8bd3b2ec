"""Toy training run comparing optimisers on one synthetic pair.

    python3 scripts/train_toy.py --steps 200 --optimizers adam sgd
"""

import argparse

from dualrc import harness as H
from dualrc.config import resolve


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--optimizers", nargs="+", default=["adam", "sgd"])
    p.add_argument("--trace-prefix", help="write <prefix>_<optimizer>.csv traces")
    args = p.parse_args()
    base = resolve(args.config, {"steps": str(args.steps)})
    for opt in args.optimizers:
        res = H.run_train(base.with_overrides({"optimizer": opt}))
        t = res.trace
        print(f"{opt:5s} lr={base.lr:g}: loss {t[0]:.4f} -> {t[-1]:.4f} "
              f"(ratio {t[-1] / t[0]:.3f}, min {min(t):.4f})")
        if args.trace_prefix:
            H.write_trace(f"{args.trace_prefix}_{opt}.csv", t)


if __name__ == "__main__":
    main()
