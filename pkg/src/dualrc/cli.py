"""``dualrc`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 check failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import io
from .backbone import load_params, save_features, save_params
from .config import PipelineConfig, resolve
from .errors import ConfigError, DualRCError
from .evaluation import Homography, mma_curve, top_k

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v
    return out


def _config(args) -> PipelineConfig:
    over = _overrides(args.set)
    for key in ("seed", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = str(val)
    return resolve(args.config, over)


def _params(args, cfg: PipelineConfig):
    return load_params(args.params) if getattr(args, "params", None) else H.make_params(cfg)


def _image(path) -> np.ndarray:
    return io.read_image(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = H.make_scene(cfg)
    io.write_pgm(out / "a.pgm", scene.image_a[0])
    io.write_pgm(out / "b.pgm", scene.image_b[0])
    scene.h.save(out / "h.txt")
    io.write_annotations(out / "annotations.txt", scene.annotations.src, scene.annotations.dst)
    print(f"wrote scene to {out}")
    return EXIT_OK


def cmd_extract(args, cfg: PipelineConfig) -> int:
    dual = H.extract(_image(args.image), cfg, _params(args, cfg))
    save_features(args.fine, dual.fine)
    save_features(args.coarse, dual.coarse)
    print(f"fine {dual.fine.height}x{dual.fine.width} stride {dual.fine.stride}, "
          f"coarse {dual.coarse.height}x{dual.coarse.width} stride {dual.coarse.stride}")
    return EXIT_OK


def cmd_match(args, cfg: PipelineConfig) -> int:
    h = Homography.load(args.homography) if args.homography else None
    res = H.run_pipeline(_image(args.image_a), _image(args.image_b), cfg, _params(args, cfg), h,
                         matches_path=args.out, curve_path=args.curve)
    print(f"{len(res.all_matches)} mutual matches, kept {len(res.matches)}")
    if res.curve is not None:
        print(" ".join(f"MMA@{t:g}={v:.4f}" for t, v in zip(res.curve.thresholds, res.curve.values)))
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    ms = H.read_matchset(args.matches)
    if args.top_k:
        ms = top_k(ms, args.top_k)
    curve = mma_curve(ms, Homography.load(args.homography), cfg.threshold_list())
    curve.save(args.out)
    print(" ".join(f"MMA@{t:g}={v:.4f}" for t, v in zip(curve.thresholds, curve.values)))
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    report = H.bench(cfg)
    Path(args.out).write_text(report.to_text(), encoding="utf-8")
    if args.timings:
        Path(args.timings).write_text(report.timings_text(), encoding="utf-8")
    sys.stdout.write(report.timings_text())
    for f in report.failures:
        print(f"FAIL {f}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_grad_check(args, cfg: PipelineConfig) -> int:
    report = H.grad_check(cfg, inject=args.inject, max_coords=args.max_coords)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_train(args, cfg: PipelineConfig) -> int:
    res = H.run_train(cfg, load_params(args.params) if args.params else None)
    H.write_trace(args.trace, res.trace)
    if args.out_params:
        save_params(args.out_params, res.params)
    first, last = res.trace[0], res.trace[-1]
    print(f"loss {first:.6g} -> {last:.6g} ({last / first:.3f} of initial) in {len(res.trace)} steps")
    return EXIT_OK


def cmd_visualize(args, cfg: PipelineConfig) -> int:
    h = Homography.load(args.homography) if args.homography else None
    H.visualize(H.read_matchset(args.matches), _image(args.image_a), _image(args.image_b),
                args.out, h, args.threshold)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)

    p = _Parser(prog="dualrc", description="Coarse-to-fine dense correspondence toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="write a synthetic image pair")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("extract", parents=[common], help="dual-resolution features of one image")
    s.add_argument("image")
    s.add_argument("--fine", required=True)
    s.add_argument("--coarse", required=True)
    s.add_argument("--params")
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("match", parents=[common], help="run the full matching pipeline")
    s.add_argument("image_a")
    s.add_argument("image_b")
    s.add_argument("--out", required=True, help="match file")
    s.add_argument("--homography", help="ground-truth H; enables the MMA curve")
    s.add_argument("--curve", help="curve CSV (needs --homography)")
    s.add_argument("--params")
    s.set_defaults(fn=cmd_match)

    s = sub.add_parser("eval-mma", parents=[common], help="MMA curve of a match file")
    s.add_argument("matches")
    s.add_argument("homography")
    s.add_argument("--out", required=True)
    s.add_argument("--top-k", type=int)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", parents=[common], help="storage and timing sweep")
    s.add_argument("--out", required=True, help="deterministic report")
    s.add_argument("--timings", help="wall-clock timings CSV")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient audit")
    s.add_argument("--out")
    s.add_argument("--inject", type=float, default=0.0,
                   help="scale one group's analytic gradient by 1+INJECT")
    s.add_argument("--max-coords", type=int)
    s.set_defaults(fn=cmd_grad_check)

    s = sub.add_parser("train-toy", parents=[common], help="toy training on a synthetic pair")
    s.add_argument("--trace", required=True, help="loss trace CSV")
    s.add_argument("--out-params")
    s.add_argument("--params")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("visualize", parents=[common], help="side-by-side match overlay (PPM)")
    s.add_argument("matches")
    s.add_argument("image_a")
    s.add_argument("image_b")
    s.add_argument("--out", required=True)
    s.add_argument("--homography")
    s.add_argument("--threshold", type=float, default=H.VIS_THRESHOLD)
    s.set_defaults(fn=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DualRCError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
