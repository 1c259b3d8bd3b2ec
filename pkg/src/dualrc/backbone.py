"""Dual-resolution feature extraction.

Two backbones are provided.  ``extract_dual`` is a small convolutional pyramid
with a lateral/fuse head in one of five fusion topologies; its trunk is frozen
after seeded initialisation and only the head is trainable.
``patch_descriptor_dual`` needs no weights at all: every feature is a
mean-subtracted, normalised image patch, which is descriptive enough on
textured scenes to exercise the matcher end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io
from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import ParamStore, Tensor

VARIANTS = ("a", "b", "c", "d", "e")
RATIO = 4
TOY_FINE_STRIDE = 2
PAPER_FINE_STRIDE = 4


@dataclass
class FeatureMap:
    """C x H x W features; cell (x, y) is centred at ((x+.5)s-.5, (y+.5)s-.5)."""

    data: Tensor
    stride: int

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"feature map must be a non-empty [C,H,W] tensor, got {self.data.dims}")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ConfigError(f"stride must be a positive integer, got {self.stride}")
        self.stride = int(self.stride)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    def cell_to_pixel(self, rows, cols):
        """Pixel (x, y) centres of grid cells given row and column indices."""
        s = self.stride
        x = (np.asarray(cols, dtype=np.float64) + 0.5) * s - 0.5
        y = (np.asarray(rows, dtype=np.float64) + 0.5) * s - 0.5
        return np.stack([x, y], axis=-1)

    def pixel_to_cell(self, xy):
        """Nearest (row, col) cell for pixel coordinates; may fall off-grid."""
        xy = np.asarray(xy, dtype=np.float64)
        col = np.floor((xy[..., 0] + 0.5) / self.stride)
        row = np.floor((xy[..., 1] + 0.5) / self.stride)
        return row.astype(np.int64), col.astype(np.int64)


@dataclass
class DualFeatures:
    fine: FeatureMap
    coarse: FeatureMap
    ratio: int = RATIO

    def __post_init__(self):
        r = self.ratio
        f, c = self.fine, self.coarse
        if f.height != r * c.height or f.width != r * c.width:
            raise ShapeError(f"fine grid {f.height}x{f.width} is not {r} x coarse grid "
                             f"{c.height}x{c.width}")
        if f.stride * r != c.stride:
            raise ShapeError(f"fine stride {f.stride} x {r} != coarse stride {c.stride}")
        if f.channels != c.channels:
            raise ShapeError(f"channel mismatch: fine {f.channels} vs coarse {c.channels}")


def dual_grid_shape(height: int, width: int, fine_stride: int = TOY_FINE_STRIDE,
                    ratio: int = RATIO) -> tuple[tuple[int, int], tuple[int, int]]:
    """(fine (H, W), coarse (H, W)) grid sizes for an image of the given size."""
    coarse_stride = fine_stride * ratio
    if height % coarse_stride or width % coarse_stride:
        raise ConfigError(f"image {height}x{width} not divisible by coarse stride {coarse_stride}")
    return ((height // fine_stride, width // fine_stride),
            (height // coarse_stride, width // coarse_stride))


# ---------------------------------------------------------------------------
# toy convolutional pyramid


@dataclass
class BackboneConfig:
    in_channels: int = 1
    trunk_channels: tuple[int, ...] = (8, 16, 32, 64)
    width: int = 32
    variant: str = "a"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}; choose from {VARIANTS}")
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        if len(self.trunk_channels) < 4:
            raise ConfigError("trunk_channels needs four entries")

    @property
    def levels(self) -> int:
        return 4 if self.variant == "e" else 3

    @property
    def required_divisor(self) -> int:
        return TOY_FINE_STRIDE * 2 ** (self.levels - 1)


def _head_layout(variant: str) -> list[tuple[str, str]]:
    """(parameter suffix, kind) pairs of the trainable head for one variant."""
    lat = {"a": (1, 2, 3), "b": (1, 3), "c": (1, 2, 3), "d": (1, 3), "e": (1, 2, 3, 4)}[variant]
    fuse = {"a": (1, 2), "b": (1,), "c": (1, 2), "d": (1,), "e": (1, 2, 3)}[variant]
    pre = {"a": (), "b": (), "c": (2, 3), "d": (3,), "e": ()}[variant]
    return ([(f"lat{i}", "lat") for i in lat] + [(f"fuse{i}", "fuse") for i in fuse]
            + [(f"pre{i}", "pre") for i in pre])


def init_backbone_params(cfg: BackboneConfig, store: ParamStore | None = None) -> ParamStore:
    """Seeded trunk (frozen) and head (trainable) weights under ``backbone.*``."""
    store = ParamStore() if store is None else store
    rng = np.random.default_rng(cfg.seed)
    chans = (cfg.in_channels,) + cfg.trunk_channels
    for lvl in range(1, cfg.levels + 1):
        shape = (chans[lvl], chans[lvl - 1], 3, 3)
        store.add(f"backbone.trunk{lvl}.kernel", T.uniform_init(rng, shape), trainable=False)
    w = cfg.width
    for name, kind in _head_layout(cfg.variant):
        if kind == "lat":
            lvl = int(name[3:])
            shape = (w, cfg.trunk_channels[lvl - 1], 1, 1)
        else:
            shape = (w, w, 3, 3)
        store.add(f"backbone.{name}.kernel", T.uniform_init(rng, shape))
    return store


def _trunk(image: Tensor, params: ParamStore, levels: int) -> list[Tensor]:
    feats = []
    x = image
    for lvl in range(1, levels + 1):
        x = T.avg_pool2d(T.relu(T.conv2d(x, params[f"backbone.trunk{lvl}.kernel"], padding=1)), 2)
        feats.append(x)
    return feats


def extract_dual(image, params: ParamStore, variant: str = "a") -> DualFeatures:
    """Run the toy pyramid and fuse it into a (fine, coarse) pair with r = 4.

    Trunk levels sit at strides 2/4/8 (plus 16 for variant ``e``).  The fine
    map is the fused stride-2 level and the coarse map is the stride-8 level of
    the head.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown fusion variant {variant!r}")
    image = T.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"image must be [C,H,W], got {image.dims}")
    levels = 4 if variant == "e" else 3
    div = TOY_FINE_STRIDE * 2 ** (levels - 1)
    _, h, w = image.shape
    if h % div or w % div:
        raise ConfigError(f"image {h}x{w} not divisible by {div} for variant {variant!r}")

    L = _trunk(image, params, levels)

    def lat(i):
        return T.conv2d(L[i - 1], params[f"backbone.lat{i}.kernel"])

    def conv3(name, x):
        return T.conv2d(x, params[f"backbone.{name}.kernel"], padding=1)

    if variant in ("a", "c", "e"):
        if variant == "e":
            p3 = conv3("fuse3", lat(3) + T.upsample_nearest(lat(4), 2))
        else:
            p3 = lat(3)
        top = conv3("pre3", p3) if variant == "c" else p3
        p2 = conv3("fuse2", lat(2) + T.upsample_nearest(top, 2))
        mid = conv3("pre2", p2) if variant == "c" else p2
        p1 = conv3("fuse1", lat(1) + T.upsample_nearest(mid, 2))
    else:
        p3 = lat(3)
        top = conv3("pre3", p3) if variant == "d" else p3
        p1 = conv3("fuse1", lat(1) + T.upsample_nearest(top, 4))

    return DualFeatures(FeatureMap(p1, TOY_FINE_STRIDE),
                        FeatureMap(p3, TOY_FINE_STRIDE * RATIO), RATIO)


# ---------------------------------------------------------------------------
# training-free patch descriptors


def patch_descriptor_features(image, patch: int = 5, stride: int = 1,
                              epsilon: float = T.DEFAULT_EPS) -> FeatureMap:
    """Patch descriptors on the stride-pooled image.

    The image is first averaged over stride x stride blocks, so cell (x, y)
    sits at the stride convention's pixel centre.  Each feature is then the
    zero-padded patch x patch neighbourhood of that cell, mean-subtracted and
    L2-normalised.  With ``patch == 1`` there is no neighbourhood to centre
    on, so the mean is kept and the feature is the normalised intensity.
    """
    if patch < 1 or patch % 2 == 0:
        raise ConfigError(f"patch size must be odd and positive, got {patch}")
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ShapeError("patch descriptors need a single-channel image")
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"expected a [1,H,W] or [H,W] image, got shape {img.shape}")
    h, w = img.shape
    if stride < 1 or h % stride or w % stride:
        raise ConfigError(f"image {h}x{w} not divisible by stride {stride}")
    if stride > 1:
        img = img.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))
        h, w = img.shape
    p = (patch - 1) // 2
    win = np.lib.stride_tricks.sliding_window_view(np.pad(img, p), (patch, patch))
    vec = win.reshape(h, w, patch * patch).transpose(2, 0, 1)
    if patch > 1:
        # the mean runs over in-image pixels only and padded entries stay 0,
        # so border cells do not all correlate through their shared padding
        inside = np.lib.stride_tricks.sliding_window_view(np.pad(np.ones((h, w)), p), (patch, patch))
        inside = inside.reshape(h, w, patch * patch).transpose(2, 0, 1)
        mean = vec.sum(axis=0, keepdims=True) / inside.sum(axis=0, keepdims=True)
        vec = (vec - mean) * inside
    return FeatureMap(T.l2_normalize_channels(vec, epsilon), stride)


def patch_descriptor_dual(image, patch: int = 5, fine_stride: int = TOY_FINE_STRIDE,
                          ratio: int = RATIO) -> DualFeatures:
    return DualFeatures(patch_descriptor_features(image, patch, fine_stride),
                        patch_descriptor_features(image, patch, fine_stride * ratio), ratio)


# ---------------------------------------------------------------------------
# feature files


def save_features(path, fm: FeatureMap) -> None:
    io.save_container(path, {"data": fm.array, "stride": np.array(fm.stride, dtype=np.float32)})


def load_features(path) -> FeatureMap:
    entries = io.load_container(path)
    if "data" not in entries or "stride" not in entries:
        raise FormatError(f"{path}: feature file needs 'data' and 'stride' entries")
    data = entries["data"]
    if data.ndim != 3 or min(data.shape) < 1:
        raise FormatError(f"{path}: 'data' must be a non-empty [C,H,W] tensor, got {data.shape}")
    stride = float(entries["stride"].reshape(-1)[0])
    if stride != int(stride) or stride < 1:
        raise FormatError(f"{path}: invalid stride {stride}")
    return FeatureMap(Tensor(data), int(stride))


def save_params(path, params: ParamStore) -> None:
    io.save_container(path, params.to_arrays())


def load_params(path, trainable=lambda name: not name.startswith("backbone.trunk")) -> ParamStore:
    store = ParamStore()
    for name, arr in io.load_container(path).items():
        store.add(name, arr.astype(np.float64), trainable=trainable(name))
    return store
