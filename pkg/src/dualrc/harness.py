"""End-to-end orchestration: pipeline runs, benchmarks, gradient checks, overlays."""

from __future__ import annotations

import contextlib
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .backbone import (RATIO, BackboneConfig, DualFeatures, extract_dual, init_backbone_params,
                       patch_descriptor_dual)
from .config import PipelineConfig
from .consensus import ConsensusConfig, init_consensus_params, refine
from .correlation import corr4d
from .errors import DualRCError
from .evaluation import Homography, MmaCurve, mma_curve, top_k
from .matcher import MatchSet, match_dense
from .synth import SyntheticScene, synth
from .tensor import ParamStore
from .training import TrainConfig, build_gt, pair_loss, train_toy

VIS_THRESHOLD = 3.0
GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-5


class CheckFailure(DualRCError, AssertionError):
    """A bench or grad-check assertion did not hold."""


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the pipeline stage name."""
    try:
        yield
    except DualRCError as exc:
        if exc.args and isinstance(exc.args[0], str) and not exc.args[0].startswith("["):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise


# ---------------------------------------------------------------------------
# setup


def make_scene(cfg: PipelineConfig, size: int | None = None,
               n_annotations: int | None = None) -> SyntheticScene:
    return synth(cfg.seed, size or cfg.size, cfg.warp, n_annotations or cfg.n_annotations,
                 translation=cfg.translation())


def make_params(cfg: PipelineConfig, consensus: ConsensusConfig | None = None,
                width: int | None = None, nc_init: str | None = None) -> ParamStore:
    """Seeded consensus weights, plus the toy backbone's when it is selected."""
    store = ParamStore()
    if cfg.backbone == "toy":
        init_backbone_params(BackboneConfig(width=width or cfg.width, variant=cfg.variant,
                                            seed=cfg.seed), store)
    init_consensus_params(consensus or cfg.consensus(), store, seed=cfg.seed,
                          mode=nc_init or cfg.nc_init)
    return store


def extract(image, cfg: PipelineConfig, params: ParamStore | None = None) -> DualFeatures:
    if cfg.backbone == "patch":
        return patch_descriptor_dual(image, cfg.patch)
    return extract_dual(image, params, cfg.variant)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    matches: MatchSet
    curve: MmaCurve | None
    all_matches: MatchSet
    timings_ms: dict = field(default_factory=dict)


def run_pipeline(image_a, image_b, cfg: PipelineConfig, params: ParamStore | None = None,
                 h: Homography | None = None, matches_path=None, curve_path=None) -> PipelineResult:
    """extract -> corr4d -> refine -> match_dense -> top_k -> mma_curve.

    The curve is only computed when a homography is given.  Files are written
    when their paths are given.
    """
    params = make_params(cfg) if params is None else params
    times = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        with stage(name):
            out = fn()
        times[name] = 1000.0 * (time.perf_counter() - t0)
        return out

    dual_a = timed("extract", lambda: extract(image_a, cfg, params))
    dual_b = timed("extract_b", lambda: extract(image_b, cfg, params))
    c = timed("corr4d", lambda: corr4d(dual_a.coarse, dual_b.coarse))
    cbar = timed("refine", lambda: refine(c, params, cfg.consensus()))
    found = timed("match", lambda: match_dense(dual_a, dual_b, cbar, cfg.keep_fraction,
                                               chunk=cfg.chunk, workers=cfg.workers))
    best = timed("top_k", lambda: top_k(found, cfg.top_k) if len(found) else found)
    curve = None
    if h is not None:
        curve = timed("mma", lambda: mma_curve(best, h, cfg.threshold_list()))
    if matches_path is not None:
        write_matchset(matches_path, best)
    if curve_path is not None and curve is not None:
        curve.save(curve_path)
    return PipelineResult(best, curve, found, times)


def run_scene(scene: SyntheticScene, cfg: PipelineConfig, **kw) -> PipelineResult:
    return run_pipeline(scene.image_a, scene.image_b, cfg, h=scene.h, **kw)


def write_matchset(path, ms: MatchSet) -> None:
    io.write_matches(path, ms.src, ms.dst, ms.scores, header="x_a y_a x_b y_b score")


def read_matchset(path) -> MatchSet:
    src, dst, scores = io.read_matches(path)
    return MatchSet(src, dst, scores)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchRow:
    coarse: tuple[int, int]
    fine: tuple[int, int]
    coarse_elements: int
    fine_equivalent: int
    stored_elements: int
    per_query_elements: int
    peak_bytes: int
    timings_ms: dict

    @property
    def ratio(self) -> float:
        return self.fine_equivalent / self.coarse_elements


@dataclass
class BenchReport:
    rows: list[BenchRow]
    ratio: int = RATIO
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    COLUMNS = ("coarse_h", "coarse_w", "fine_h", "fine_w", "coarse_elements",
               "fine_equivalent", "ratio", "stored_elements", "per_query_elements", "peak_bytes")

    def to_text(self) -> str:
        """Deterministic table; wall-clock timings are kept out of it."""
        lines = [" ".join(self.COLUMNS)]
        for r in self.rows:
            vals = (r.coarse[0], r.coarse[1], r.fine[0], r.fine[1], r.coarse_elements,
                    r.fine_equivalent, f"{r.ratio:g}", r.stored_elements, r.per_query_elements,
                    r.peak_bytes)
            lines.append(" ".join(str(v) for v in vals))
        lines.extend(f"# FAIL {f}" for f in self.failures)
        return "\n".join(lines) + "\n"

    def timings_text(self) -> str:
        stages = sorted({k for r in self.rows for k in r.timings_ms})
        lines = ["coarse_h,coarse_w," + ",".join(f"{s}_ms" for s in stages)]
        for r in self.rows:
            lines.append(f"{r.coarse[0]},{r.coarse[1]},"
                         + ",".join(f"{r.timings_ms.get(s, 0.0):.3f}" for s in stages))
        return "\n".join(lines) + "\n"


def bench(cfg: PipelineConfig, sizes: list[int] | None = None) -> BenchReport:
    """Run the matcher on square coarse grids of the given sizes and audit storage.

    For every size the refined coarse tensor must hold exactly h_a w_a h_b w_b
    elements, a fine tensor would hold r^4 times as many, and the largest
    simultaneously stored correlation is the coarse tensor plus one chunk of
    per-query score maps.
    """
    sizes = cfg.bench_list() if sizes is None else sizes
    params = make_params(cfg)
    ccfg = cfg.consensus()
    r = RATIO
    rows, failures = [], []
    for s in sizes:
        fine_stride = 2
        px = s * r * fine_stride
        scene = synth(cfg.seed, px, "translation", n_annotations=1,
                      translation=(float(fine_stride), 0.0))
        with T.track_allocations() as tracker:
            t0 = time.perf_counter()
            dual_a = extract(scene.image_a, cfg, params)
            dual_b = extract(scene.image_b, cfg, params)
            t1 = time.perf_counter()
            cbar = refine(corr4d(dual_a.coarse, dual_b.coarse), params, ccfg)
            t2 = time.perf_counter()
            match_dense(dual_a, dual_b, cbar, cfg.keep_fraction, chunk=cfg.chunk,
                        workers=cfg.workers)
            t3 = time.perf_counter()
        times = {"extract": 1000 * (t1 - t0), "coarse": 1000 * (t2 - t1),
                 "match": 1000 * (t3 - t2)}
        ch, cw = dual_a.coarse.height, dual_a.coarse.width
        fh, fw = dual_a.fine.height, dual_a.fine.width
        coarse_el = ch * cw * dual_b.coarse.height * dual_b.coarse.width
        fine_el = fh * fw * dual_b.fine.height * dual_b.fine.width
        stored_coarse = tracker.max_elements.get("correlation", 0)
        per_query = tracker.max_elements.get("score_map", 0)
        n_queries = math.ceil(cfg.keep_fraction * ch * cw) * r * r
        expect_chunk = min(cfg.chunk, n_queries) * dual_b.fine.height * dual_b.fine.width
        row = BenchRow((ch, cw), (fh, fw), coarse_el, fine_el, stored_coarse + per_query,
                       per_query, tracker.peak_bytes, times)
        if stored_coarse != coarse_el:
            failures.append(f"{ch}x{cw}: stored coarse elements {stored_coarse} != {coarse_el}")
        if fine_el != r ** 4 * coarse_el:
            failures.append(f"{ch}x{cw}: fine/coarse element ratio {row.ratio:g} != {r ** 4}")
        if row.stored_elements != coarse_el + expect_chunk:
            failures.append(f"{ch}x{cw}: stored correlation {row.stored_elements} != "
                            f"coarse {coarse_el} + chunk maps {expect_chunk}")
        rows.append(row)
    return BenchReport(rows, r, failures)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradReport:
    errors: dict[str, float]
    n_checked: dict[str, int]
    tolerance: float = GRAD_TOLERANCE

    @property
    def ok(self) -> bool:
        return all(np.isfinite(e) and e <= self.tolerance for e in self.errors.values())

    def to_text(self) -> str:
        lines = ["group coordinates max_rel_error status"]
        for g in sorted(self.errors):
            e = self.errors[g]
            status = "ok" if np.isfinite(e) and e <= self.tolerance else "FAIL"
            lines.append(f"{g} {self.n_checked[g]} {e:.3e} {status}")
        return "\n".join(lines) + "\n"


def param_group(name: str) -> str:
    """``backbone.lat2.kernel`` -> ``backbone.lat``; ``nc.layer0.kernel`` -> ``nc``."""
    head = name.split(".")
    if head[0] == "nc":
        return "nc"
    return ".".join(head[:-2] + [head[-2].rstrip("0123456789")])


def grad_check_instance(cfg: PipelineConfig):
    """(params, image_a, image_b, annotations, train config) for a tiny toy problem."""
    ccfg = ConsensusConfig.parse(cfg.grad_nc_layers)
    toy = dataclasses.replace(cfg, backbone="toy")
    params = make_params(toy, consensus=ccfg, width=cfg.grad_width, nc_init="random")
    div = 16 if cfg.variant == "e" else 8
    size = max(div, cfg.grad_size - cfg.grad_size % div)
    scene = synth(cfg.seed, size, "translation", cfg.grad_annotations,
                  translation=(2.0, 0.0), coarse_stride=div)
    tcfg = TrainConfig(sigma=cfg.sigma, lam=cfg.lam, variant=cfg.variant, consensus=ccfg)
    return params, scene.image_a, scene.image_b, scene.annotations, tcfg


def grad_check(cfg: PipelineConfig, params: ParamStore | None = None, inject: float = 0.0,
               max_coords: int | None = None, tolerance: float = GRAD_TOLERANCE) -> GradReport:
    """Compare backprop against central differences on every trainable parameter.

    The error of a group is max |analytic - numeric| over its coordinates,
    divided by the largest gradient magnitude in the group.  ``inject`` scales
    the analytic gradient of the first group by (1 + inject), which a sound
    checker must flag.  ``max_coords`` limits the coordinates probed per
    tensor to a seeded random subset.
    """
    base, image_a, image_b, ann, tcfg = grad_check_instance(cfg)
    params = base if params is None else params
    gt = build_gt(ann, extract_dual(image_b, params, tcfg.variant).fine, tcfg.sigma,
                  source=extract_dual(image_a, params, tcfg.variant).fine)

    def loss_value() -> float:
        return pair_loss(params, image_a, image_b, ann, tcfg, gt).item()

    params.zero_grad()
    T.backward(pair_loss(params, image_a, image_b, ann, tcfg, gt), params)
    rng = np.random.default_rng(cfg.seed)
    diffs: dict[str, float] = {}
    scales: dict[str, float] = {}
    counts: dict[str, int] = {}
    first_group = None
    for name, p in params.trainable():
        group = param_group(name)
        first_group = first_group or group
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if group == first_group and inject:
            analytic = analytic * (1.0 + inject)
        coords = np.arange(p.data.size)
        if max_coords is not None and max_coords < p.data.size:
            coords = np.sort(rng.choice(p.data.size, max_coords, replace=False))
        flat = p.data.reshape(-1)
        for idx in coords.tolist():
            old = flat[idx]
            flat[idx] = old + FD_STEP
            up = loss_value()
            flat[idx] = old - FD_STEP
            down = loss_value()
            flat[idx] = old
            numeric = (up - down) / (2 * FD_STEP)
            a = analytic.reshape(-1)[idx]
            diffs[group] = max(diffs.get(group, 0.0), abs(a - numeric))
            scales[group] = max(scales.get(group, 0.0), abs(a), abs(numeric))
            counts[group] = counts.get(group, 0) + 1
    errors = {g: (diffs[g] / scales[g] if scales[g] > 0 else diffs[g]) for g in diffs}
    return GradReport(errors, counts, tolerance)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    trace: list[float]
    params: ParamStore
    scene: SyntheticScene


def run_train(cfg: PipelineConfig, params: ParamStore | None = None, callback=None) -> TrainResult:
    """Seeded toy training on one synthetic pair with the toy backbone."""
    toy = dataclasses.replace(cfg, backbone="toy")
    scene = synth(cfg.seed, cfg.train_size, cfg.warp, cfg.train_annotations,
                  translation=cfg.translation())
    if params is None:
        params = make_params(toy, nc_init="random")
    trace = train_toy([(scene.image_a, scene.image_b, scene.annotations)], params,
                      cfg.train_config(), callback)
    return TrainResult(trace, params, scene)


def write_trace(path, trace: list[float]) -> None:
    lines = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# overlay

GREEN = (0, 200, 0)
RED = (230, 0, 0)
YELLOW = (240, 220, 0)


def _grey_rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.mean(axis=0)
    g = io.to_uint8(img)
    return np.repeat(g[:, :, None], 3, axis=2)


def _dot(canvas: np.ndarray, x: float, y: float, color, radius: int = 1) -> None:
    h, w, _ = canvas.shape
    cx, cy = int(round(x)), int(round(y))
    canvas[max(cy - radius, 0):min(cy + radius + 1, h),
           max(cx - radius, 0):min(cx + radius + 1, w)] = color


def overlay(matches: MatchSet, image_a, image_b, h: Homography | None = None,
            threshold: float = VIS_THRESHOLD) -> np.ndarray:
    """Side-by-side RGB canvas with both endpoints of each match marked.

    With a homography a match is green when its reprojection error is at most
    ``threshold`` pixels and red otherwise; without one every match is yellow.
    """
    a, b = _grey_rgb(image_a), _grey_rgb(image_b)
    rows = max(a.shape[0], b.shape[0])
    canvas = np.zeros((rows, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    if len(matches) == 0:
        return canvas
    if h is None:
        colors = [YELLOW] * len(matches)
    else:
        err = np.linalg.norm(h.apply(matches.src) - matches.dst, axis=1)
        colors = [GREEN if e <= threshold else RED for e in err]
    for (xa, ya), (xb, yb), col in zip(matches.src, matches.dst, colors):
        _dot(canvas, xa, ya, col)
        _dot(canvas, xb + a.shape[1], yb, col)
    return canvas


def visualize(matches: MatchSet, image_a, image_b, out_path, h: Homography | None = None,
              threshold: float = VIS_THRESHOLD) -> None:
    io.write_ppm(out_path, overlay(matches, image_a, image_b, h, threshold))
