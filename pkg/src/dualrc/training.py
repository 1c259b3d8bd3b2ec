"""Supervision from sparse keypoints.

Ground truth per query is a Gaussian-blurred one-hot over the target's fine
grid.  Predictions are the fused score maps over the whole target frame,
softmax-normalised per query.  The loss is the Frobenius keypoint term plus a
weighted Gram-matrix ("orthogonal") term, summed over both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .backbone import TOY_FINE_STRIDE, DualFeatures, FeatureMap, extract_dual
from .consensus import ConsensusConfig, refine
from .correlation import corr4d, normalized, transpose4d
from .errors import AnnotationError, ConfigError, ShapeError, TrainingError
from .matcher import _corner_indices
from .tensor import ParamStore, Tensor

DEFAULT_LAMBDA = 0.05
DEFAULT_SIGMA = 1.0
DEFAULT_LR = 0.01


@dataclass
class KeypointAnnotation:
    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if len(self.src) != len(self.dst):
            raise AnnotationError("src and dst keypoint counts differ")

    @property
    def count(self) -> int:
        return len(self.src)

    def swapped(self) -> "KeypointAnnotation":
        return KeypointAnnotation(self.dst, self.src)


@dataclass
class GroundTruthMaps:
    ab: np.ndarray
    ba: np.ndarray | None
    sigma: float


def snap_cells(points, target: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = target.pixel_to_cell(points)
    bad = (rows < 0) | (rows >= target.height) | (cols < 0) | (cols >= target.width)
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise AnnotationError(f"keypoint {np.asarray(points)[first].tolist()} snaps outside the "
                              f"{target.height}x{target.width} grid")
    return rows, cols


def blurred_one_hot(points, target: FeatureMap, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """[N, H*W] rows: Gaussian (radius ceil(3 sigma)) around each snapped cell, sum 1."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    rows, cols = snap_cells(points, target)
    h, w = target.height, target.width
    rad = math.ceil(3 * sigma)
    d = np.arange(-rad, rad + 1)
    g1 = np.exp(-(d * d) / (2.0 * sigma * sigma))
    kernel = np.outer(g1, g1)
    out = np.zeros((len(rows), h * w))
    for n, (r0, c0) in enumerate(zip(rows.tolist(), cols.tolist())):
        plane = np.zeros((h + 2 * rad, w + 2 * rad))
        plane[r0:r0 + 2 * rad + 1, c0:c0 + 2 * rad + 1] = kernel
        plane = plane[rad:rad + h, rad:rad + w]
        out[n] = (plane / plane.sum()).reshape(-1)
    return out


def build_gt(ann: KeypointAnnotation, target: FeatureMap, sigma: float = DEFAULT_SIGMA,
             source: FeatureMap | None = None) -> GroundTruthMaps:
    """A->B rows on ``target``; B->A rows on ``source`` when it is given."""
    ab = blurred_one_hot(ann.dst, target, sigma)
    ba = None if source is None else blurred_one_hot(ann.src, source, sigma)
    return GroundTruthMaps(ab, ba, sigma)


def _fused_rows(src: FeatureMap, tgt: FeatureMap, cbar: Tensor, points, r: int) -> Tensor:
    """Differentiable fused score maps [N, H_t*W_t] for keypoints in the source."""
    rows, cols = snap_cells(points, src)
    c = src.channels
    ns = T.reshape(normalized(src), (c, src.height * src.width))
    nt = T.reshape(normalized(tgt), (c, tgt.height * tgt.width))
    q = T.permute(T.getitem(ns, (slice(None), rows * src.width + cols)), (1, 0))
    fine = T.matmul(q, nt)

    hs, ws, ht, wt = cbar.shape
    flat = T.reshape(cbar, (hs * ws, ht * wt))
    i_lo, i_hi, fi = _corner_indices(rows, r, hs)
    j_lo, j_hi, fj = _corner_indices(cols, r, ws)
    fi, fj = fi[:, None], fj[:, None]
    coarse = T.add(
        T.add(T.mul(flat[i_lo * ws + j_lo], (1 - fi) * (1 - fj)),
              T.mul(flat[i_lo * ws + j_hi], (1 - fi) * fj)),
        T.add(T.mul(flat[i_hi * ws + j_lo], fi * (1 - fj)),
              T.mul(flat[i_hi * ws + j_hi], fi * fj)))
    mask = T.upsample_nearest(T.reshape(T.relu(coarse), (len(rows), ht, wt)), r)
    return T.mul(fine, T.reshape(mask, (len(rows), tgt.height * tgt.width)))


def predicted_maps(dual_a: DualFeatures, dual_b: DualFeatures, cbar,
                   ann: KeypointAnnotation) -> tuple[Tensor, Tensor]:
    """Softmax-normalised fused score rows for both directions."""
    cbar = T.as_tensor(cbar)
    r = dual_a.ratio
    s_ab = T.softmax(_fused_rows(dual_a.fine, dual_b.fine, cbar, ann.src, r), axis=-1)
    s_ba = T.softmax(_fused_rows(dual_b.fine, dual_a.fine, transpose4d(cbar), ann.dst, r), axis=-1)
    return s_ab, s_ba


def _check(pred: Tensor, gt: np.ndarray) -> None:
    if gt is None or pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.dims} and ground truth "
                         f"{None if gt is None else list(gt.shape)} differ")


def loss_keypoint(s_ab, s_ba, gt: GroundTruthMaps) -> Tensor:
    s_ab, s_ba = T.as_tensor(s_ab), T.as_tensor(s_ba)
    _check(s_ab, gt.ab)
    _check(s_ba, gt.ba)
    return T.add(T.frobenius(T.sub(s_ab, gt.ab)), T.frobenius(T.sub(s_ba, gt.ba)))


def _gram_gap(s: Tensor, g: np.ndarray) -> Tensor:
    return T.frobenius(T.sub(T.matmul(s, T.permute(s, (1, 0))), g @ g.T))


def loss_orthogonal(s_ab, s_ba, gt: GroundTruthMaps) -> Tensor:
    s_ab, s_ba = T.as_tensor(s_ab), T.as_tensor(s_ba)
    _check(s_ab, gt.ab)
    _check(s_ba, gt.ba)
    return T.add(_gram_gap(s_ab, gt.ab), _gram_gap(s_ba, gt.ba))


def loss_total(s_ab, s_ba, gt: GroundTruthMaps, lam: float = DEFAULT_LAMBDA) -> Tensor:
    return T.add(loss_keypoint(s_ab, s_ba, gt), T.mul(loss_orthogonal(s_ab, s_ba, gt), lam))


# ---------------------------------------------------------------------------
# toy training loop


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = DEFAULT_LR
    halve_every: int | None = None
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma: float = DEFAULT_SIGMA
    lam: float = DEFAULT_LAMBDA
    variant: str = "a"
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.lr < 0:
            raise ConfigError("steps and lr must be nonnegative")

    @property
    def halving_interval(self) -> int:
        # 15 epochs halved every 5: one third of the run
        return self.halve_every or max(1, self.steps // 3)

    def lr_at(self, step: int) -> float:
        return self.lr * 0.5 ** (step // self.halving_interval)


def pair_loss(params: ParamStore, image_a, image_b, ann: KeypointAnnotation,
              cfg: TrainConfig, gt: GroundTruthMaps | None = None) -> Tensor:
    """Full forward pass for one annotated pair: backbone -> refine -> loss."""
    dual_a = extract_dual(image_a, params, cfg.variant)
    dual_b = extract_dual(image_b, params, cfg.variant)
    if gt is None:
        gt = build_gt(ann, dual_b.fine, cfg.sigma, source=dual_a.fine)
    cbar = refine(corr4d(dual_a.coarse, dual_b.coarse), params, cfg.consensus)
    s_ab, s_ba = predicted_maps(dual_a, dual_b, cbar, ann)
    return loss_total(s_ab, s_ba, gt, cfg.lam)


def _fine_grid(image) -> FeatureMap:
    """Placeholder map carrying only the toy backbone's fine grid geometry."""
    _, h, w = np.shape(image.data if isinstance(image, Tensor) else image)
    return FeatureMap(np.zeros((1, h // TOY_FINE_STRIDE, w // TOY_FINE_STRIDE)), TOY_FINE_STRIDE)


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore, lr: float) -> None:
        c = self.cfg
        self.t += 1
        for name, p in params.trainable():
            if p.grad is None:
                continue
            m = self.m.get(name, 0.0) * c.beta1 + (1 - c.beta1) * p.grad
            v = self.v.get(name, 0.0) * c.beta2 + (1 - c.beta2) * p.grad * p.grad
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - c.beta1 ** self.t)
            vhat = v / (1 - c.beta2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + c.adam_eps)


def sgd_step(params: ParamStore, lr: float) -> None:
    for _, p in params.trainable():
        if p.grad is not None:
            p.data = p.data - lr * p.grad


def train_toy(pairs: Iterable, params: ParamStore, cfg: TrainConfig,
              callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Gradient descent on ``loss_total`` over (image_a, image_b, annotation) pairs.

    ``pairs`` is cycled if it runs out before ``cfg.steps``.  Returns the loss
    recorded at every step, before that step's update.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("no training pairs")
    gts: dict[int, GroundTruthMaps] = {}
    adam = _Adam(cfg) if cfg.optimizer == "adam" else None
    trace: list[float] = []
    for step in range(cfg.steps):
        k = step % len(pairs)
        image_a, image_b, ann = pairs[k]
        params.zero_grad()
        if k not in gts:
            gts[k] = build_gt(ann, _fine_grid(image_b), cfg.sigma, source=_fine_grid(image_a))
        loss = pair_loss(params, image_a, image_b, ann, cfg, gts[k])
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}", step)
        trace.append(value)
        if callback is not None:
            callback(step, value)
        T.backward(loss, params)
        for name, p in params.trainable():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for {name} at step {step}", step)
        lr = cfg.lr_at(step)
        if adam is not None:
            adam.step(params, lr)
        else:
            sgd_step(params, lr)
    return trace
