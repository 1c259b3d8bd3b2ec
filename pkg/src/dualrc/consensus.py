"""Neighbourhood consensus on the coarse 4D correlation tensor.

The learnable stack N(.) is a sequence of same-padded 4D convolutions.  It is
applied symmetrically, N(C) + N(C^T)^T, so neither matching direction is
favoured, and it is sandwiched between two soft mutual-nearest-neighbour
filters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correlation import transpose4d
from .errors import ConfigError, ShapeError
from .tensor import ParamStore, Tensor

MNN_EPS = 1e-12


def _default_layers():
    return [(5, 1, 16), (5, 16, 16), (5, 16, 1)]


@dataclass
class ConsensusConfig:
    layers: list = field(default_factory=_default_layers)
    relu_between: bool = True

    def __post_init__(self):
        self.layers = [tuple(int(v) for v in layer) for layer in self.layers]
        if not self.layers:
            raise ConfigError("consensus stack needs at least one layer")
        if self.layers[0][1] != 1 or self.layers[-1][2] != 1:
            raise ConfigError("consensus stack must map 1 channel to 1 channel")
        for (k, _, cout), nxt in zip(self.layers, self.layers[1:] + [None]):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"consensus kernel size must be odd, got {k}")
            if nxt is not None and nxt[1] != cout:
                raise ConfigError(f"layer channel mismatch: {cout} feeds {nxt[1]}")

    @classmethod
    def parse(cls, text: str, relu_between: bool = True) -> "ConsensusConfig":
        """Build from ``"k:cin:cout,k:cin:cout,..."``."""
        try:
            layers = [tuple(int(v) for v in part.split(":")) for part in text.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad consensus layer spec {text!r}") from exc
        if any(len(l) != 3 for l in layers):
            raise ConfigError(f"bad consensus layer spec {text!r}")
        return cls(layers, relu_between)

    def format(self) -> str:
        return ",".join(f"{k}:{a}:{b}" for k, a, b in self.layers)


def kernel_name(i: int) -> str:
    return f"nc.layer{i}.kernel"


INIT_MODES = ("random", "delta", "consensus", "zero")


def displacement_kernel(c_out: int, c_in: int, k: int) -> np.ndarray:
    """Channel 0 -> 0 kernel averaging the k x k neighbours that share a displacement.

    Entry [a, b, c, d] is 1/k^2 when (a, b) == (c, d), i.e. when moving the
    source and target cells by the same offset: a hand-set version of the
    consistency pattern a trained consensus layer picks up on translations.
    """
    w = np.zeros((c_out, c_in, k, k, k, k))
    for a in range(k):
        for b in range(k):
            w[0, 0, a, b, a, b] = 1.0 / (k * k)
    return w


def init_consensus_params(cfg: ConsensusConfig, store: ParamStore | None = None,
                          seed: int = 0, mode: str = "random") -> ParamStore:
    """Add ``nc.layer{i}.kernel`` entries.

    ``random`` draws +-sqrt(6/fan_in); ``delta`` makes every layer pass
    channel 0 through; ``consensus`` is ``delta`` except that the first
    layer averages along constant displacements; ``zero`` is all zeros.
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown consensus init mode {mode!r}; choose from {INIT_MODES}")
    store = ParamStore() if store is None else store
    rng = np.random.default_rng(seed)
    for i, (k, cin, cout) in enumerate(cfg.layers):
        shape = (cout, cin, k, k, k, k)
        if mode == "random":
            w = T.uniform_init(rng, shape)
        elif mode == "consensus" and i == 0:
            w = displacement_kernel(cout, cin, k)
        elif mode in ("delta", "consensus"):
            w = T.delta_kernel(cout, cin, k, 4)
        else:
            w = np.zeros(shape)
        store.add(kernel_name(i), w)
    return store


def nc_stack(c, params: ParamStore, cfg: ConsensusConfig) -> Tensor:
    """One pass of N(.): channel axis added, conv4d layers, channel axis removed."""
    c = T.as_tensor(c)
    if c.ndim != 4:
        raise ShapeError(f"expected a 4D correlation tensor, got {c.dims}")
    x = T.reshape(c, (1,) + c.shape)
    last = len(cfg.layers) - 1
    for i, _ in enumerate(cfg.layers):
        x = T.conv4d(x, params[kernel_name(i)])
        if cfg.relu_between and i < last:
            x = T.relu(x)
    return T.reshape(x, c.shape)


def nc_filter(c, params: ParamStore, cfg: ConsensusConfig) -> Tensor:
    """N(C) + N(C^T)^T."""
    c = T.as_tensor(c)
    return T.add(nc_stack(c, params, cfg), transpose4d(nc_stack(transpose4d(c), params, cfg)))


def soft_mutual_nn(c, epsilon: float = MNN_EPS) -> Tensor:
    """Rescale each score by its ratios to the column max and the row max.

    Negative scores are clamped to zero first.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    x = T.relu(T.as_tensor(c))
    max_src = T.amax(x, (0, 1), keepdims=True)
    max_dst = T.amax(x, (2, 3), keepdims=True)
    ratio_a = T.div(x, T.maximum(max_src, epsilon))
    ratio_b = T.div(x, T.maximum(max_dst, epsilon))
    return T.mul(T.mul(ratio_a, ratio_b), x)


def refine(c, params: ParamStore, cfg: ConsensusConfig, epsilon: float = MNN_EPS) -> Tensor:
    return soft_mutual_nn(nc_filter(soft_mutual_nn(c, epsilon), params, cfg), epsilon)
