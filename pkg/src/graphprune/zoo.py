"""Built-in toy networks and a small builder for assembling NetworkSpecs."""
from __future__ import annotations

import numpy as np

from .netmodel import EdgeKind, LayerKind, LayerSpec, NetworkSpec


class NetBuilder:
    """Appends layers in topological order, tracking shapes as it goes.

    >>> b = NetBuilder((3, 16, 16), rng=np.random.default_rng(0))
    >>> x = b.conv(b.input_id, 8)
    """

    def __init__(self, input_resolution: tuple[int, int, int], rng: np.random.Generator):
        self.rng = rng
        self.layers: list[LayerSpec] = []
        self.edges: list[tuple[int, int, EdgeKind]] = []
        self.input_resolution = tuple(input_resolution)
        c, h, w = self.input_resolution
        self._shape: dict[int, tuple[int, int, int]] = {}
        self.input_id = self._add(LayerSpec(0, LayerKind.INPUT, c, c, spatial_out=(h, w)), [], (c, h, w))

    def _add(self, layer: LayerSpec, srcs, shape) -> int:
        self.layers.append(layer)
        for src, kind in srcs:
            self.edges.append((src, layer.id, kind))
        self._shape[layer.id] = shape
        return layer.id

    @property
    def _next(self) -> int:
        return len(self.layers)

    def shape(self, layer_id: int) -> tuple[int, int, int]:
        return self._shape[layer_id]

    def conv(self, src, out, kernel=3, stride=1, padding=None, prunable=True, relu=False, bias=False):
        c, h, w = self._shape[src]
        pad = kernel // 2 if padding is None else padding
        ho = (h + 2 * pad - kernel) // stride + 1
        wo = (w + 2 * pad - kernel) // stride + 1
        fan_in = c * kernel * kernel
        weights = (self.rng.standard_normal((out, c, kernel, kernel)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        layer = LayerSpec(
            self._next, LayerKind.CONV2D, c, out,
            kernel=(kernel, kernel), stride=(stride, stride), padding=(pad, pad),
            spatial_out=(ho, wo), weights=weights,
            bias=np.zeros(out, dtype=np.float32) if bias else None,
            prunable=prunable, relu=relu,
        )
        return self._add(layer, [(src, EdgeKind.REGULAR)], (out, ho, wo))

    def bn(self, src, relu=False):
        c, h, w = self._shape[src]
        layer = LayerSpec(
            self._next, LayerKind.BATCHNORM, c, c, spatial_out=(h, w),
            weights=np.ones(c, dtype=np.float32), bias=np.zeros(c, dtype=np.float32),
            running_mean=np.zeros(c, dtype=np.float32), running_var=np.ones(c, dtype=np.float32),
            relu=relu,
        )
        return self._add(layer, [(src, EdgeKind.REGULAR)], (c, h, w))

    def add(self, main, shortcut, relu=False, shortcut_kind=EdgeKind.RESIDUAL):
        c, h, w = self._shape[main]
        if self._shape[shortcut] != (c, h, w):
            raise ValueError("Add inputs must have identical shapes")
        layer = LayerSpec(self._next, LayerKind.ADD, c, c, spatial_out=(h, w), relu=relu)
        return self._add(layer, [(main, EdgeKind.REGULAR), (shortcut, shortcut_kind)], (c, h, w))

    def pool(self, src, kernel=None, mode="avg"):
        c, h, w = self._shape[src]
        k = h if kernel is None else kernel
        ho, wo = h // k, w // k
        layer = LayerSpec(
            self._next, LayerKind.POOL, c, c, kernel=(k, k), stride=(k, k),
            spatial_out=(ho, wo), pool_mode=mode,
        )
        return self._add(layer, [(src, EdgeKind.REGULAR)], (c, ho, wo))

    def flatten(self, src):
        c, h, w = self._shape[src]
        layer = LayerSpec(self._next, LayerKind.FLATTEN, c, c * h * w)
        return self._add(layer, [(src, EdgeKind.REGULAR)], (c * h * w, 1, 1))

    def linear(self, src, out, prunable=True, relu=False, bias=True):
        c = self._shape[src][0]
        bound = 1.0 / np.sqrt(c)
        weights = self.rng.uniform(-bound, bound, (out, c)).astype(np.float32)
        layer = LayerSpec(
            self._next, LayerKind.LINEAR, c, out, weights=weights,
            bias=np.zeros(out, dtype=np.float32) if bias else None,
            prunable=prunable, relu=relu,
        )
        return self._add(layer, [(src, EdgeKind.REGULAR)], (out, 1, 1))

    def output(self, src):
        c = self._shape[src][0]
        return self._add(LayerSpec(self._next, LayerKind.OUTPUT, c, c), [(src, EdgeKind.REGULAR)], (c, 1, 1))

    def build(self) -> NetworkSpec:
        net = NetworkSpec(tuple(self.layers), tuple(self.edges), self.input_resolution)
        net.validate()
        return net


def toy_cnn(seed: int = 0, resolution: int = 16, num_classes: int = 10, widths=(16, 32, 32)) -> NetworkSpec:
    """Reference net: Conv16 - Conv32 - Conv32 (+identity residual) - Linear10."""
    b = NetBuilder((3, resolution, resolution), np.random.default_rng(seed))
    x = b.bn(b.conv(b.input_id, widths[0]), relu=True)
    trunk = b.bn(b.conv(x, widths[1], stride=2), relu=True)
    y = b.bn(b.conv(trunk, widths[2]))
    x = b.add(y, trunk, relu=True)
    x = b.flatten(b.pool(x))
    return _finish(b, b.linear(x, num_classes, prunable=False))


def _finish(b: NetBuilder, last: int) -> NetworkSpec:
    b.output(last)
    return b.build()


def chain_net(seed: int = 0, widths=(16, 32), num_classes: int = 10, resolution: int = 8) -> NetworkSpec:
    """Plain conv chain ending in an unprunable classifier."""
    b = NetBuilder((3, resolution, resolution), np.random.default_rng(seed))
    x = b.input_id
    for w in widths:
        x = b.conv(x, w, relu=True, bias=True)
    x = b.flatten(b.pool(x))
    return _finish(b, b.linear(x, num_classes, prunable=False))


def random_net(rng: np.random.Generator, residual: bool | None = None, batchnorm: bool | None = None) -> NetworkSpec:
    """Small random architecture for property tests (chain or residual)."""
    residual = bool(rng.integers(2)) if residual is None else residual
    batchnorm = bool(rng.integers(2)) if batchnorm is None else batchnorm
    res = int(rng.choice([6, 8]))
    b = NetBuilder((int(rng.integers(1, 4)), res, res), rng)

    def block_conv(src, width, stride=1, relu=True):
        k = int(rng.choice([1, 3]))
        y = b.conv(src, width, kernel=k, stride=stride, relu=relu and not batchnorm, bias=not batchnorm)
        return b.bn(y, relu=relu) if batchnorm else y

    x = block_conv(b.input_id, int(rng.integers(2, 7)))
    for _ in range(int(rng.integers(1, 3))):
        width = int(rng.integers(2, 7))
        stride = int(rng.choice([1, 2])) if b.shape(x)[1] >= 4 else 1
        x = block_conv(x, width, stride=stride)
        if residual:
            for _ in range(int(rng.integers(1, 3))):
                y = block_conv(x, width)
                y = block_conv(y, width, relu=False)
                x = b.add(y, x, relu=True)
    if rng.integers(2):
        x = b.pool(x)
    x = b.flatten(x)
    if rng.integers(2):
        x = b.linear(x, int(rng.integers(3, 8)), relu=True)
    return _finish(b, b.linear(x, int(rng.integers(2, 6)), prunable=False))
