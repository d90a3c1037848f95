"""The adapter that turns activation statistics into a per-sample step multiplier."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Module, parameter
from .quantizers import IntRange

NUM_FEATURES = 4
BETA_FLOOR = 1e-3
OUTPUT_MAPS = ("exp", "affine_plus_one")


def featurize(x: np.ndarray, s: float, r: IntRange) -> np.ndarray:
    """Per-sample ``[mean|x|, std(x), max|x|, clip_fraction]`` over all non-batch axes.

    ``clip_fraction`` is the share of elements with ``|x| > s * p``.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] == 0:
        raise ValueError("featurize needs nonempty samples")
    mag = np.abs(flat)
    return np.stack([
        mag.mean(axis=1),
        flat.std(axis=1),
        mag.max(axis=1),
        (mag > s * r.p).mean(axis=1),
    ], axis=1)


class Adapter(Module):
    """One- or two-layer perceptron producing ``beta > 0`` per sample.

    The final layer starts at exactly zero, so ``beta == 1`` until training
    moves it.
    """

    def __init__(self, depth: int = 2, hidden: int = 16, output_map: str = "exp", seed: int = 0):
        super().__init__()
        if depth not in (1, 2):
            raise ValueError(f"adapter depth must be 1 or 2, got {depth}")
        if hidden < 1:
            raise ValueError("adapter hidden width must be >= 1")
        if output_map not in OUTPUT_MAPS:
            raise ValueError(f"unknown output map {output_map!r}")
        self.depth = depth
        self.hidden = hidden
        self.output_map = output_map
        f = NUM_FEATURES
        if depth == 1:
            self.w1 = parameter(np.zeros((f, 1)))
            self.b1 = parameter(np.zeros(1), decay=False)
        else:
            rng = np.random.default_rng(seed)
            lim = 1.0 / math.sqrt(f)
            self.w1 = parameter(rng.uniform(-lim, lim, size=(f, hidden)))
            self.b1 = parameter(np.zeros(hidden), decay=False)
            self.w2 = parameter(np.zeros((hidden, 1)))
            self.b2 = parameter(np.zeros(1), decay=False)

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, features) -> T.Tensor:
        f = features if isinstance(features, T.Tensor) else T.Tensor(features)
        h = _linear(f, self.w1, self.b1)
        if self.depth == 2:
            h = _linear(T.relu(h), self.w2, self.b2)
        z = T.reshape(h, (h.shape[0],))
        if self.output_map == "exp":
            return T.exp(z)
        ones = T.Tensor(np.ones(z.shape))
        return T.maximum_scalar(T.add(z, ones), BETA_FLOOR)


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.bias_add(T.matmul(x, w), b)


def adapter_init(depth: int = 2, hidden: int = 16, seed: int = 0, output_map: str = "exp") -> Adapter:
    return Adapter(depth=depth, hidden=hidden, output_map=output_map, seed=seed)


def adapter_forward(features: np.ndarray, params: Adapter) -> np.ndarray:
    with T.no_grad():
        return params(features).data.copy()
