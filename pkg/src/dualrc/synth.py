"""Seeded synthetic image pairs related by a known homography."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .evaluation import Homography
from .training import KeypointAnnotation

WARP_KINDS = ("identity", "translation", "affine", "projective")
DEFAULT_ANNOTATIONS = 128
BLUR_RADIUS = 2


@dataclass
class SyntheticScene:
    image_a: np.ndarray
    image_b: np.ndarray
    h: Homography
    annotations: KeypointAnnotation


def box_blur(img: np.ndarray, radius: int = BLUR_RADIUS) -> np.ndarray:
    k = 2 * radius + 1
    padded = np.pad(img, radius, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.mean(axis=(-2, -1))


def texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Box-blurred white noise rescaled to [0, 1]."""
    t = box_blur(rng.random((h, w)))
    lo, hi = t.min(), t.max()
    return (t - lo) / (hi - lo)


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; points outside the image read 0."""
    h, w = img.shape
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.zeros(x.shape)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(x.shape)
            vals[ok] = img[yi[ok], xi[ok]]
            out += wx * wy * vals
    return out


def warp_image(img: np.ndarray, h: Homography) -> np.ndarray:
    """Image B with B(p) = A(H^-1 p)."""
    if np.array_equal(h.H, np.eye(3)):
        return img.copy()
    rows, cols = img.shape
    ys, xs = np.mgrid[0:rows, 0:cols].astype(np.float64)
    src = h.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    return bilinear_sample(img, src[:, 0], src[:, 1]).reshape(rows, cols)


def random_homography(rng: np.random.Generator, kind: str, h: int, w: int) -> Homography:
    if kind == "identity":
        return Homography.identity()
    if kind == "translation":
        tx, ty = rng.integers(-(w // 8), w // 8 + 1), rng.integers(-(h // 8), h // 8 + 1)
        return Homography.translation(float(tx), float(ty))
    cx, cy = (w - 1) / 2, (h - 1) / 2
    angle = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.9, 1.1)
    shear = rng.uniform(-0.05, 0.05)
    a = scale * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    a = a @ np.array([[1.0, shear], [0.0, 1.0]])
    t = rng.uniform(-w / 16, w / 16, size=2)
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = np.array([cx, cy]) - a @ np.array([cx, cy]) + t
    if kind == "projective":
        m[2, :2] = rng.uniform(-0.3, 0.3, size=2) / max(h, w)
        m[2, 2] = 1.0 - m[2, :2] @ np.array([cx, cy])
    elif kind != "affine":
        raise ConfigError(f"unknown warp kind {kind!r}; choose from {WARP_KINDS}")
    return Homography(m)


def sample_annotations(rng: np.random.Generator, h: Homography, shape: tuple[int, int], n: int,
                       margin: float = 1.0, max_draws: int = 50) -> KeypointAnnotation:
    """n points in A whose warp lands inside B, both at least ``margin`` from the border."""
    rows, cols = shape
    lo = np.array([margin, margin])
    hi = np.array([cols - 1 - margin, rows - 1 - margin])
    kept = np.zeros((0, 2))
    for _ in range(max_draws):
        cand = rng.uniform(lo, hi, size=(4 * n, 2))
        dst = h.apply(cand)
        ok = np.all((dst >= lo) & (dst <= hi), axis=1)
        kept = np.concatenate([kept, cand[ok]])
        if len(kept) >= n:
            src = kept[:n]
            return KeypointAnnotation(src, h.apply(src))
    raise GenerationError(f"overlap too small to sample {n} annotations")


def synth(seed: int, size, kind: str = "translation", n_annotations: int = DEFAULT_ANNOTATIONS,
          translation: tuple[float, float] | None = None, coarse_stride: int = 8) -> SyntheticScene:
    """Seeded scene: textured image A, its warp B, and annotations on the overlap."""
    rows, cols = (size, size) if np.isscalar(size) else tuple(size)
    if rows % coarse_stride or cols % coarse_stride:
        raise ConfigError(f"size {rows}x{cols} not divisible by coarse stride {coarse_stride}")
    if kind not in WARP_KINDS:
        raise ConfigError(f"unknown warp kind {kind!r}; choose from {WARP_KINDS}")
    rng = np.random.default_rng(seed)
    img_a = texture(rng, rows, cols)
    if translation is not None:
        if kind != "translation":
            raise ConfigError("an explicit translation needs kind='translation'")
        h = Homography.translation(*translation)
    else:
        h = random_homography(rng, kind, rows, cols)
    img_b = warp_image(img_a, h)
    ann = sample_annotations(rng, h, (rows, cols), n_annotations)
    return SyntheticScene(img_a[None], img_b[None], h, ann)
