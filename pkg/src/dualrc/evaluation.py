"""Homography-based evaluation: warping, mean matching accuracy, top-k."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from .errors import DegeneratePointError, EmptyInputError, FormatError, ShapeError
from .matcher import MatchSet

DEFAULT_THRESHOLDS = tuple(float(t) for t in range(1, 11))
DEGENERATE_W = 1e-12


@dataclass
class Homography:
    """3x3 projective map from A pixels to B pixels (row-major)."""

    H: np.ndarray

    def __post_init__(self):
        h = np.array(self.H, dtype=np.float64)
        if h.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {h.shape}")
        if h[2, 2] != 0:
            h = h / h[2, 2]
        if abs(np.linalg.det(h)) < 1e-12:
            raise DegeneratePointError("singular homography")
        self.H = h

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    @classmethod
    def load(cls, path) -> "Homography":
        try:
            return cls(io.read_homography(path))
        except DegeneratePointError as exc:
            raise FormatError(f"{path}: {exc}") from exc

    def save(self, path) -> None:
        io.write_homography(path, self.H)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))

    def apply(self, pts) -> np.ndarray:
        """Warp an [N,2] array of (x, y) points."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        homo = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ self.H.T
        w = homo[:, 2]
        if np.any(np.abs(w) <= DEGENERATE_W):
            raise DegeneratePointError("point maps to infinity under the homography")
        return homo[:, :2] / w[:, None]


def warp(h: Homography, p) -> tuple[float, float]:
    x, y = h.apply(np.asarray(p, dtype=np.float64).reshape(1, 2))[0]
    return float(x), float(y)


@dataclass
class MmaCurve:
    thresholds: list
    values: list

    def save(self, path) -> None:
        io.write_curve(path, self.thresholds, self.values)

    def at(self, t: float) -> float:
        return self.values[self.thresholds.index(t)]


def _errors(matches: MatchSet, h: Homography) -> np.ndarray:
    if len(matches) == 0:
        raise EmptyInputError("MMA is undefined for an empty match set")
    return np.linalg.norm(h.apply(matches.src) - matches.dst, axis=1)


def mma(matches: MatchSet, h: Homography, t: float) -> float:
    """Fraction of matches whose warped source lies within t pixels (inclusive)."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    err = _errors(matches, h)
    return float(np.count_nonzero(t - err >= 0)) / len(err)


def mma_curve(matches: MatchSet, h: Homography, thresholds=DEFAULT_THRESHOLDS) -> MmaCurve:
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    return MmaCurve(thresholds, [mma(matches, h, t) for t in thresholds])


def top_k(matches: MatchSet, k: int) -> MatchSet:
    """k highest-scoring matches, score-descending, ties kept in original order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-matches.scores, kind="stable")[:k]
    return matches.subset(order)
