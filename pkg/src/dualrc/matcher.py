"""Coarse-to-fine dense matching.

For a fine query cell (i, j) the refined coarse tensor is sampled bilinearly
at (i/r, j/r) to give a coarse score map over the target's coarse grid.  That
map, clamped at zero and nearest-upsampled by r, masks the fine cosine score
map, and the match is the argmax of the product.  Only fine cells inside the
best-scoring fraction of coarse cells are queried, matching is run in both
directions, and the mutual pairs are returned.

No fine-resolution 4D tensor is ever formed: queries are processed in chunks
whose working set is ``chunk x H_b x W_b``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .backbone import DualFeatures, FeatureMap
from .correlation import ScoreMap2D, fine_score_map, normalized
from .errors import BoundsError, ConfigError, ShapeError

DEFAULT_KEEP_FRACTION = 0.5
DEFAULT_CHUNK = 64


@dataclass(frozen=True)
class Match:
    src: tuple[float, float]
    dst: tuple[float, float]
    score: float


@dataclass
class MatchSet:
    """Scored correspondences in pixel coordinates.

    ``src_cells``/``dst_cells`` keep the (row, col) fine-grid indices the
    pixels came from; ``queried`` lists every fine source cell that was
    queried (after pruning).
    """

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray
    direction: str = "mutual"
    src_cells: np.ndarray | None = None
    dst_cells: np.ndarray | None = None
    queried: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.scores)):
            raise ShapeError("src, dst and scores must have equal length")
        if self.direction not in ("A->B", "B->A", "mutual"):
            raise ConfigError(f"unknown direction {self.direction!r}")

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Match]:
        for s, d, sc in zip(self.src, self.dst, self.scores):
            yield Match((float(s[0]), float(s[1])), (float(d[0]), float(d[1])), float(sc))

    def subset(self, idx) -> "MatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        cells = lambda a: None if a is None else a[idx]
        return MatchSet(self.src[idx], self.dst[idx], self.scores[idx], self.direction,
                        cells(self.src_cells), cells(self.dst_cells), self.queried)

    def swapped(self) -> "MatchSet":
        direction = {"A->B": "B->A", "B->A": "A->B"}.get(self.direction, self.direction)
        return MatchSet(self.dst, self.src, self.scores, direction,
                        self.dst_cells, self.src_cells, None)


# ---------------------------------------------------------------------------
# single-query operations


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)


def _corner_indices(idx, r: int, n_coarse: int):
    """Floor/ceil coarse indices of idx / r, clamped, and the fractional weight."""
    pos = np.asarray(idx, dtype=np.float64) / r
    lo = np.floor(pos)
    frac = pos - lo
    hi = np.minimum(np.ceil(pos), n_coarse - 1).astype(np.int64)
    return np.minimum(lo, n_coarse - 1).astype(np.int64), hi, frac


def _blend(cbar: np.ndarray, rows, cols, r: int) -> np.ndarray:
    """Bilinear blend of the four corner slices for a batch of fine queries.

    Returns [n, h_b * w_b].
    """
    ha, wa = cbar.shape[:2]
    flat = cbar.reshape(ha, wa, -1)
    i_lo, i_hi, fi = _corner_indices(rows, r, ha)
    j_lo, j_hi, fj = _corner_indices(cols, r, wa)
    fi = fi[:, None]
    fj = fj[:, None]
    return ((1 - fi) * (1 - fj) * flat[i_lo, j_lo] + (1 - fi) * fj * flat[i_lo, j_hi]
            + fi * (1 - fj) * flat[i_hi, j_lo] + fi * fj * flat[i_hi, j_hi])


def _check_query(query, h: int, w: int):
    i, j = query
    if not (0 <= i < h and 0 <= j < w):
        raise BoundsError(f"query {query} outside {h}x{w} fine grid")
    return int(i), int(j)


def coarse_score_map(cbar, fine_query: tuple[int, int], r: int) -> ScoreMap2D:
    """Coarse score map for a fine query, sampled from cbar at (i/r, j/r)."""
    cbar = _as_array(cbar)
    if cbar.ndim != 4:
        raise ShapeError(f"expected a 4D tensor, got shape {cbar.shape}")
    ha, wa, hb, wb = cbar.shape
    i, j = _check_query(fine_query, r * ha, r * wa)
    row = _blend(cbar, np.array([i]), np.array([j]), r)[0]
    return ScoreMap2D(row.reshape(hb, wb), (i, j))


def _check_dims(fa: FeatureMap, fb: FeatureMap, cbar: np.ndarray, r: int) -> None:
    if cbar.ndim != 4:
        raise ShapeError(f"expected a 4D tensor, got shape {cbar.shape}")
    ha, wa, hb, wb = cbar.shape
    if (fa.height, fa.width) != (r * ha, r * wa) or (fb.height, fb.width) != (r * hb, r * wb):
        raise ShapeError(f"fine grids {fa.height}x{fa.width}, {fb.height}x{fb.width} are not "
                         f"{r} x coarse grids {ha}x{wa}, {hb}x{wb}")
    if fa.channels != fb.channels:
        raise ShapeError(f"channel mismatch: {fa.channels} vs {fb.channels}")


def fused_score_map(fa_fine: FeatureMap, fb_fine: FeatureMap, cbar, query: tuple[int, int],
                    r: int) -> ScoreMap2D:
    """Fine cosine map masked by the nearest-upsampled, zero-clamped coarse map."""
    cbar = _as_array(cbar)
    _check_dims(fa_fine, fb_fine, cbar, r)
    fine = fine_score_map(fa_fine, fb_fine, query)
    coarse = coarse_score_map(cbar, query, r).data
    mask = T.upsample_nearest(np.maximum(coarse, 0.0), r).data
    return ScoreMap2D(fine.data * mask, fine.query)


def retrieve(fused) -> tuple[int, int, float]:
    """Argmax (row, col, score); ties go to the lowest row-major index."""
    data = fused.data if isinstance(fused, ScoreMap2D) else np.asarray(fused)
    idx = int(np.argmax(data))
    k, l = divmod(idx, data.shape[1])
    return k, l, float(data.flat[idx])


# ---------------------------------------------------------------------------
# dense matching


def coarse_matches(cbar) -> tuple[np.ndarray, np.ndarray]:
    """Per coarse source cell: argmax target (linear index) and its score."""
    cbar = _as_array(cbar)
    flat = cbar.reshape(cbar.shape[0] * cbar.shape[1], -1)
    best = np.argmax(flat, axis=1)
    return best, flat[np.arange(len(flat)), best]


def kept_coarse_cells(cbar, keep_fraction: float) -> np.ndarray:
    """Linear indices of the ceil(keep_fraction * M) best coarse source cells, ascending."""
    if not 0 < keep_fraction <= 1:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    _, scores = coarse_matches(cbar)
    n_keep = math.ceil(keep_fraction * len(scores))
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:n_keep])


def _query_cells(kept: np.ndarray, coarse_w: int, r: int) -> np.ndarray:
    """Fine (row, col) cells inside the kept coarse cells, in row-major order."""
    ci, cj = np.divmod(kept, coarse_w)
    di, dj = np.divmod(np.arange(r * r), r)
    rows = (ci[:, None] * r + di[None, :]).reshape(-1)
    cols = (cj[:, None] * r + dj[None, :]).reshape(-1)
    order = np.lexsort((cols, rows))
    return np.stack([rows[order], cols[order]], axis=1)


def _cosine_rows(q: np.ndarray, tgt_t: np.ndarray) -> np.ndarray:
    """[n, M] dot products of query columns q [C, n] with target rows tgt_t [M, C].

    Each row is its own matrix-vector product, so the result for a query does
    not depend on how queries are batched: chunk size and worker count cannot
    change a single bit.
    """
    out = np.empty((q.shape[1], tgt_t.shape[0]))
    for n in range(q.shape[1]):
        out[n] = tgt_t @ q[:, n]
    return out


def _directional(n_src: np.ndarray, n_tgt: np.ndarray, cbar: np.ndarray, tgt_hw, r: int,
                 cells: np.ndarray, chunk: int, workers: int):
    """Best target (linear fine index) and fused score for each query cell."""
    ht, wt = tgt_hw
    src_w = n_src.shape[2]
    src_flat = n_src.reshape(n_src.shape[0], -1)
    tgt_t = np.ascontiguousarray(n_tgt.reshape(n_tgt.shape[0], -1).T)
    hb, wb = cbar.shape[2:]

    def run(start):
        block = cells[start:start + chunk]
        rows, cols = block[:, 0], block[:, 1]
        fine = _cosine_rows(src_flat[:, rows * src_w + cols], tgt_t)
        coarse = np.maximum(_blend(cbar, rows, cols, r), 0.0).reshape(-1, hb, wb)
        mask = np.repeat(np.repeat(coarse, r, axis=1), r, axis=2).reshape(len(block), -1)
        fused = fine * mask
        T.record("score_map", fused.size)
        best = np.argmax(fused, axis=1)
        return best, fused[np.arange(len(block)), best]

    starts = range(0, len(cells), chunk)
    if workers > 1 and len(cells) > chunk:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def match_dense(dual_a: DualFeatures, dual_b: DualFeatures, cbar,
                keep_fraction: float = DEFAULT_KEEP_FRACTION, *,
                chunk: int = DEFAULT_CHUNK, workers: int = 1) -> MatchSet:
    """Mutual nearest-neighbour fine matches guided by the refined coarse tensor."""
    cbar = _as_array(cbar)
    if dual_a.ratio != dual_b.ratio:
        raise ShapeError(f"ratio mismatch: {dual_a.ratio} vs {dual_b.ratio}")
    if chunk < 1 or workers < 1:
        raise ConfigError("chunk and workers must be positive")
    r = dual_a.ratio
    fa, fb = dual_a.fine, dual_b.fine
    _check_dims(fa, fb, cbar, r)
    if cbar.shape != (dual_a.coarse.height, dual_a.coarse.width,
                      dual_b.coarse.height, dual_b.coarse.width):
        raise ShapeError(f"cbar shape {cbar.shape} does not match the coarse maps")
    T.record("correlation", cbar.size)
    T.record("score_map_per_query", fb.height * fb.width)

    cbar_t = np.ascontiguousarray(np.transpose(cbar, (2, 3, 0, 1)))
    na = normalized(fa).data
    nb = normalized(fb).data
    cells_a = _query_cells(kept_coarse_cells(cbar, keep_fraction), cbar.shape[1], r)
    cells_b = _query_cells(kept_coarse_cells(cbar_t, keep_fraction), cbar.shape[3], r)
    best_ab, score_ab = _directional(na, nb, cbar, (fb.height, fb.width), r, cells_a, chunk, workers)
    best_ba, _ = _directional(nb, na, cbar_t, (fa.height, fa.width), r, cells_b, chunk, workers)

    back = dict(zip((cells_b[:, 0] * fb.width + cells_b[:, 1]).tolist(), best_ba.tolist()))
    src_lin = cells_a[:, 0] * fa.width + cells_a[:, 1]
    keep = np.array([back.get(q) == p for p, q in zip(src_lin.tolist(), best_ab.tolist())],
                    dtype=bool).reshape(-1)
    src_cells = cells_a[keep]
    dst_cells = np.stack(np.divmod(best_ab[keep], fb.width), axis=1).reshape(-1, 2)
    return MatchSet(fa.cell_to_pixel(src_cells[:, 0], src_cells[:, 1]),
                    fb.cell_to_pixel(dst_cells[:, 0], dst_cells[:, 1]),
                    score_ab[keep], "mutual", src_cells, dst_cells, cells_a)
