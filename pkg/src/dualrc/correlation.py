"""Cosine correlation between feature maps: the full coarse 4D tensor and
per-query fine 2D score maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .errors import BoundsError, ShapeError
from .tensor import Tensor


@dataclass
class ScoreMap2D:
    data: np.ndarray
    query: tuple[int, int]


def normalized(fm: FeatureMap, epsilon: float = T.DEFAULT_EPS) -> Tensor:
    return T.l2_normalize_channels(fm.data, epsilon)


def corr4d(fa: FeatureMap, fb: FeatureMap, epsilon: float = T.DEFAULT_EPS) -> Tensor:
    """C[i,j,k,l] = <f_a(i,j), f_b(k,l)> over normalised vectors; differentiable."""
    if fa.channels != fb.channels:
        raise ShapeError(f"channel mismatch: {fa.channels} vs {fb.channels}")
    c = fa.channels
    na = T.reshape(normalized(fa, epsilon), (c, fa.height * fa.width))
    nb = T.reshape(normalized(fb, epsilon), (c, fb.height * fb.width))
    out = T.matmul(T.permute(na, (1, 0)), nb)
    return T.reshape(out, (fa.height, fa.width, fb.height, fb.width))


def transpose4d(c) -> Tensor:
    """Swap matching direction: out[k,l,i,j] = c[i,j,k,l]."""
    c = T.as_tensor(c)
    if c.ndim != 4:
        raise ShapeError(f"expected a 4D tensor, got {c.dims}")
    return T.permute(c, (2, 3, 0, 1))


def fine_score_map(fa_fine: FeatureMap, fb_fine: FeatureMap, query: tuple[int, int],
                   epsilon: float = T.DEFAULT_EPS) -> ScoreMap2D:
    i, j = query
    if not (0 <= i < fa_fine.height and 0 <= j < fa_fine.width):
        raise BoundsError(f"query {query} outside {fa_fine.height}x{fa_fine.width} grid")
    if fa_fine.channels != fb_fine.channels:
        raise ShapeError(f"channel mismatch: {fa_fine.channels} vs {fb_fine.channels}")
    qa = normalized(fa_fine, epsilon).data[:, i, j]
    nb = normalized(fb_fine, epsilon).data
    flat = qa @ nb.reshape(nb.shape[0], -1)
    return ScoreMap2D(flat.reshape(fb_fine.height, fb_fine.width), (i, j))
