"""Target-network representation.

A network is a DAG of :class:`LayerSpec` nodes.  Output channels that meet at a
residual ``Add`` must be pruned together, so pruning decisions are made over
*decision units* (sets of coupled physical channels) rather than raw channels.
Everything downstream (FLOPs, graph observations, physical slicing) derives a
per-layer keep vector from a :class:`PruningMask` over those units.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyLayerError,
    InvalidGroupCountError,
    MaskLengthError,
    NonDagError,
    PaddingOverflowError,
    UnsupportedLayerError,
)


class LayerKind(enum.IntEnum):
    # the integer value doubles as the structural "kind" code in node features
    INPUT = 0
    CONV2D = 1
    LINEAR = 2
    BATCHNORM = 3
    POOL = 4
    ADD = 5
    FLATTEN = 6
    OUTPUT = 7


class EdgeKind(enum.IntEnum):
    REGULAR = 0
    SKIP = 1
    RESIDUAL = 2


PRODUCERS = (LayerKind.INPUT, LayerKind.CONV2D, LayerKind.LINEAR)
WEIGHTED = (LayerKind.CONV2D, LayerKind.LINEAR)

N_STRUCTURAL = 7
N_COMPUTATIONAL = 3
EDGE_DIM = 4


@dataclass(frozen=True, eq=False)
class LayerSpec:
    id: int
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    spatial_out: tuple[int, int] = (1, 1)
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    # BatchNorm only
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5
    prunable: bool = False
    relu: bool = False
    pool_mode: str = "avg"

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind == LayerKind.CONV2D and self.weights is not None:
            expected = (self.out_channels, self.in_channels, *self.kernel)
            if tuple(self.weights.shape) != expected:
                raise ValueError(f"layer {self.id}: conv weight shape {self.weights.shape} != {expected}")
        if self.kind == LayerKind.LINEAR and self.weights is not None:
            expected = (self.out_channels, self.in_channels)
            if tuple(self.weights.shape) != expected:
                raise ValueError(f"layer {self.id}: linear weight shape {self.weights.shape} != {expected}")
        if self.kind in (LayerKind.INPUT, LayerKind.OUTPUT) and self.prunable:
            raise ValueError(f"layer {self.id}: {self.kind.name} cannot be prunable")
        if self.prunable and self.kind not in WEIGHTED:
            raise ValueError(f"layer {self.id}: only Conv2D/Linear layers can be prunable")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("weights", "bias", "running_mean", "running_var"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    edges: tuple[tuple[int, int, EdgeKind], ...]
    input_resolution: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "edges", tuple((int(s), int(d), EdgeKind(k)) for s, d, k in self.edges)
        )
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate layer ids")

    @cached_property
    def _by_id(self) -> dict[int, LayerSpec]:
        return {layer.id: layer for layer in self.layers}

    @cached_property
    def _position(self) -> dict[int, int]:
        return {layer.id: i for i, layer in enumerate(self.layers)}

    def layer(self, layer_id: int) -> LayerSpec:
        return self._by_id[layer_id]

    def position(self, layer_id: int) -> int:
        return self._position[layer_id]

    def inputs_of(self, layer_id: int) -> list[int]:
        return [s for s, d, _ in self.edges if d == layer_id]

    def topo_order(self) -> list[int]:
        """Kahn's algorithm; ties resolved by declaration order."""
        indeg = {layer.id: 0 for layer in self.layers}
        succ: dict[int, list[int]] = {layer.id: [] for layer in self.layers}
        for s, d, _ in self.edges:
            if s not in indeg or d not in indeg:
                raise ValueError(f"edge ({s}, {d}) references an unknown layer")
            indeg[d] += 1
            succ[s].append(d)
        ready = deque(sorted((i for i, n in indeg.items() if n == 0), key=self.position))
        order = []
        while ready:
            node = ready.popleft()
            order.append(node)
            for nxt in sorted(succ[node], key=self.position):
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    ready.append(nxt)
        if len(order) != len(self.layers):
            raise NonDagError("edge list contains a cycle")
        return order

    def validate(self) -> None:
        self.topo_order()
        sources = [l.id for l in self.layers if not self.inputs_of(l.id)]
        sinks = [l.id for l in self.layers if not any(s == l.id for s, _, _ in self.edges)]
        if len(sources) != 1 or self.layer(sources[0]).kind != LayerKind.INPUT:
            raise ValueError(f"expected a unique Input source, got {sources}")
        if len(sinks) != 1 or self.layer(sinks[0]).kind != LayerKind.OUTPUT:
            raise ValueError(f"expected a unique Output sink, got {sinks}")
        for layer in self.layers:
            inbound = [e for e in self.edges if e[1] == layer.id]
            if layer.kind == LayerKind.ADD:
                if len(inbound) != 2 or not any(k == EdgeKind.RESIDUAL for _, _, k in inbound):
                    raise ValueError(f"Add layer {layer.id} needs two inbound edges, one Residual")
            elif layer.kind != LayerKind.INPUT and len(inbound) != 1:
                raise ValueError(f"layer {layer.id} ({layer.kind.name}) needs exactly one input")

    @cached_property
    def indexing(self) -> ChannelIndexing:
        return build_channel_indexing(self)

    @cached_property
    def c_max(self) -> int:
        widths = [l.out_channels for l in self.layers if l.kind in WEIGHTED]
        return max(widths) if widths else 1


class PruningMask:
    """One bit per decision unit; ``True`` means the unit is pruned."""

    __slots__ = ("bits",)

    def __init__(self, bits: Iterable[bool] | np.ndarray):
        self.bits = np.array(bits, dtype=bool).reshape(-1)

    @classmethod
    def empty(cls, n_units: int) -> PruningMask:
        return cls(np.zeros(n_units, dtype=bool))

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return isinstance(other, PruningMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"PruningMask({''.join('1' if b else '0' for b in self.bits)})"

    def copy(self) -> PruningMask:
        return PruningMask(self.bits.copy())

    @property
    def sparsity(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0


@dataclass(frozen=True)
class ChannelIndexing:
    units: tuple[tuple[tuple[int, int], ...], ...]
    unit_of: dict[tuple[int, int], int]
    # layer id -> unit id of each output channel (-1 where unprunable);
    # Flatten layers map each feature back to its source channel's unit
    layer_units: dict[int, np.ndarray] = field(repr=False)
    # decision units grouped by the channel space they live in, in topo order
    spaces: tuple[tuple[int, ...], ...] = field(repr=False)
    # producing layers of each space (same order as ``spaces``)
    space_layers: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def C(self) -> int:
        return len(self.units)

    def units_of_layer(self, layer_id: int) -> np.ndarray:
        u = self.layer_units[layer_id]
        return u[u >= 0]


class _UnionFind:
    def __init__(self):
        self.parent: list[int] = []

    def add(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_channel_indexing(net: NetworkSpec) -> ChannelIndexing:
    order = net.topo_order()
    uf = _UnionFind()
    space_of: dict[int, int] = {}
    size: dict[int, int] = {}
    flatten_src: dict[int, tuple[int, int]] = {}  # flatten layer -> (source layer, factor)

    for lid in order:
        layer = net.layer(lid)
        ins = net.inputs_of(lid)
        if layer.kind in PRODUCERS or layer.kind == LayerKind.FLATTEN:
            sid = uf.add()
            size[sid] = layer.out_channels
            space_of[lid] = sid
            if layer.kind == LayerKind.FLATTEN:
                src = net.layer(ins[0])
                factor = layer.out_channels // max(src.out_channels, 1)
                flatten_src[lid] = (ins[0], factor)
        elif layer.kind == LayerKind.ADD:
            a, b = (space_of[i] for i in ins)
            if size[uf.find(a)] != size[uf.find(b)]:
                raise ValueError(f"Add layer {lid} joins spaces of different widths")
            if any(i in flatten_src for i in ins):
                raise ValueError(f"Add layer {lid} joins a flattened space")
            uf.union(a, b)
            space_of[lid] = a
        else:
            space_of[lid] = space_of[ins[0]]

    producers: dict[int, list[int]] = {}
    for lid in order:
        kind = net.layer(lid).kind
        if kind in PRODUCERS:
            producers.setdefault(uf.find(space_of[lid]), []).append(lid)

    units: list[tuple[tuple[int, int], ...]] = []
    unit_of: dict[tuple[int, int], int] = {}
    space_units: dict[int, np.ndarray] = {}
    spaces, space_layers = [], []
    for root, members in producers.items():  # dict order follows topo order of first producer
        width = size[root]
        prunable = all(net.layer(m).prunable for m in members)
        ids = np.full(width, -1, dtype=np.int64)
        if prunable:
            first = len(units)
            for ch in range(width):
                unit = tuple((m, ch) for m in members)
                for member in unit:
                    unit_of[member] = len(units)
                units.append(unit)
            ids[:] = np.arange(first, first + width)
            spaces.append(tuple(range(first, first + width)))
            space_layers.append(tuple(members))
        space_units[root] = ids

    layer_units: dict[int, np.ndarray] = {}
    for lid in order:
        if lid in flatten_src:
            src, factor = flatten_src[lid]
            layer_units[lid] = np.repeat(layer_units[src], factor)
        else:
            root = uf.find(space_of[lid])
            layer_units[lid] = space_units.get(root, np.full(size[root], -1, dtype=np.int64))

    return ChannelIndexing(
        units=tuple(units),
        unit_of=unit_of,
        layer_units=layer_units,
        spaces=tuple(spaces),
        space_layers=tuple(space_layers),
    )


def _mask_bits(net: NetworkSpec, mask: PruningMask | np.ndarray | None) -> np.ndarray:
    C = net.indexing.C
    if mask is None:
        return np.zeros(C, dtype=bool)
    bits = mask.bits if isinstance(mask, PruningMask) else np.asarray(mask, dtype=bool)
    if bits.size != C:
        raise MaskLengthError(f"mask has {bits.size} bits, network has {C} decision units")
    return bits


def keep_vectors(net: NetworkSpec, mask: PruningMask | np.ndarray | None) -> dict[int, np.ndarray]:
    """Per-layer boolean vector over output channels, ``True`` = kept."""
    bits = _mask_bits(net, mask)
    keep = {}
    for lid, ids in net.indexing.layer_units.items():
        k = np.ones(ids.size, dtype=bool)
        pr = ids >= 0
        k[pr] = ~bits[ids[pr]]
        keep[lid] = k
    return keep


def _in_kept(net: NetworkSpec, layer: LayerSpec, keep: dict[int, np.ndarray]) -> int:
    ins = net.inputs_of(layer.id)
    if not ins:
        return layer.in_channels
    return int(keep[ins[0]].sum())


def layer_flops(net: NetworkSpec, mask: PruningMask | np.ndarray | None = None) -> dict[int, int]:
    keep = keep_vectors(net, mask)
    out = {}
    for layer in net.layers:
        if layer.kind == LayerKind.CONV2D:
            kh, kw = layer.kernel
            h, w = layer.spatial_out
            out[layer.id] = 2 * kh * kw * _in_kept(net, layer, keep) * int(keep[layer.id].sum()) * h * w
        elif layer.kind == LayerKind.LINEAR:
            out[layer.id] = 2 * _in_kept(net, layer, keep) * int(keep[layer.id].sum())
        else:
            out[layer.id] = 0
    return out


def flops(net: NetworkSpec, mask: PruningMask | np.ndarray | None = None) -> int:
    """2 x multiply-accumulates of Conv2D and Linear layers under ``mask``."""
    return sum(layer_flops(net, mask).values())


def layer_params(net: NetworkSpec, mask: PruningMask | np.ndarray | None = None) -> dict[int, int]:
    keep = keep_vectors(net, mask)
    out = {}
    for layer in net.layers:
        n_out = int(keep[layer.id].sum())
        count = 0
        if layer.kind == LayerKind.CONV2D:
            count = n_out * _in_kept(net, layer, keep) * layer.kernel[0] * layer.kernel[1]
        elif layer.kind == LayerKind.LINEAR:
            count = n_out * _in_kept(net, layer, keep)
        elif layer.kind == LayerKind.BATCHNORM and layer.weights is not None:
            count = n_out
        if layer.bias is not None:
            count += n_out
        out[layer.id] = count
    return out


def param_count(net: NetworkSpec, mask: PruningMask | np.ndarray | None = None) -> int:
    return sum(layer_params(net, mask).values())


def memory_bytes(net: NetworkSpec, mask: PruningMask | np.ndarray | None = None) -> int:
    # proxy for the unspecified "memory footprint": f32 parameter storage
    return 4 * param_count(net, mask)


def channel_l1_norms(layer: LayerSpec) -> np.ndarray:
    if layer.kind not in WEIGHTED:
        raise UnsupportedLayerError(f"layer {layer.id} is {layer.kind.name}; l1 norms need Conv2D/Linear")
    w = np.asarray(layer.weights, dtype=np.float64)
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


def unit_l1_norms(net: NetworkSpec) -> np.ndarray:
    """l1 norm of each decision unit, summed over its member channels."""
    idx = net.indexing
    norms = np.zeros(idx.C)
    per_layer = {}
    for u, members in enumerate(idx.units):
        for lid, ch in members:
            if lid not in per_layer:
                per_layer[lid] = channel_l1_norms(net.layer(lid))
            norms[u] += per_layer[lid][ch]
    return norms


def group_partition(C: int, n: int) -> list[range]:
    """Split ``C`` units into ``n`` contiguous groups, larger groups first."""
    if not 1 <= n <= C:
        raise InvalidGroupCountError(f"need 1 <= n <= C, got n={n}, C={C}")
    base, extra = divmod(C, n)
    groups, start = [], 0
    for g in range(n):
        width = base + (1 if g < extra else 0)
        groups.append(range(start, start + width))
        start += width
    return groups


@dataclass(frozen=True, eq=False)
class GraphObservation:
    node_features: np.ndarray  # [N, d]
    edge_index: np.ndarray  # [E, 2] (src node, dst node)
    edge_features: np.ndarray  # [E, EDGE_DIM]
    node_layer_map: tuple[int, ...]

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def dense_edges(self) -> np.ndarray:
        """[N, N, d_e] tensor, entry [dst, src] holds the feature of edge src -> dst."""
        n = self.n_nodes
        out = np.zeros((n, n, self.edge_features.shape[1]), dtype=self.edge_features.dtype)
        for (s, d), f in zip(self.edge_index, self.edge_features):
            out[d, s] = f
        return out

    def in_adjacency(self) -> np.ndarray:
        """Boolean [N, N]; entry [i, j] is true for j in N(i) or j == i."""
        adj = np.eye(self.n_nodes, dtype=bool)
        for s, d in self.edge_index:
            adj[d, s] = True
        return adj


def build_graph(
    net: NetworkSpec,
    mask: PruningMask | np.ndarray | None,
    group_marker: Iterable[int] = (),
    activations_l1: Sequence[float] | None = None,
    c_max: int | None = None,
) -> GraphObservation:
    """Feature-annotated graph of ``net`` under ``mask``, one node per layer."""
    c_max = net.c_max if c_max is None else c_max
    for layer in net.layers:
        if layer.kind in WEIGHTED and layer.out_channels > c_max:
            raise PaddingOverflowError(f"layer {layer.id} has {layer.out_channels} channels > C_max={c_max}")
    idx = net.indexing
    keep = keep_vectors(net, mask)
    f_now, f_orig = layer_flops(net, mask), layer_flops(net, None)
    p_now, p_orig = layer_params(net, mask), layer_params(net, None)
    total_orig = max(sum(f_orig.values()), 1)
    marker = set(int(u) for u in group_marker)

    d = N_STRUCTURAL + N_COMPUTATIONAL + 2 * c_max
    x = np.zeros((len(net.layers), d), dtype=np.float32)
    for i, layer in enumerate(net.layers):
        x[i, :N_STRUCTURAL] = (
            int(layer.kind),
            _in_kept(net, layer, keep),
            int(keep[layer.id].sum()),
            *layer.kernel,
            *layer.stride,
        )
        lid = layer.id
        x[i, N_STRUCTURAL] = f_now[lid] / f_orig[lid] if f_orig[lid] else 1.0
        x[i, N_STRUCTURAL + 1] = p_now[lid] / p_orig[lid] if p_orig[lid] else 1.0
        x[i, N_STRUCTURAL + 2] = f_now[lid] / total_orig
        if layer.kind in WEIGHTED:
            base = N_STRUCTURAL + N_COMPUTATIONAL
            w = layer.out_channels
            x[i, base : base + w] = channel_l1_norms(layer) * keep[lid]
            units = idx.layer_units[lid]
            x[i, base + c_max : base + c_max + w] = [u in marker for u in units]

    pos = {layer.id: i for i, layer in enumerate(net.layers)}
    edge_index = np.array([(pos[s], pos[t]) for s, t, _ in net.edges], dtype=np.int64).reshape(-1, 2)
    e = np.zeros((len(net.edges), EDGE_DIM), dtype=np.float32)
    for k, (_, _, kind) in enumerate(net.edges):
        e[k, int(kind)] = 1.0
        if activations_l1 is not None:
            e[k, 3] = activations_l1[k]
    return GraphObservation(x, edge_index, e, tuple(pos))


def apply_mask(net: NetworkSpec, mask: PruningMask | np.ndarray | None) -> NetworkSpec:
    """Physically remove pruned channels and slice every consumer to match."""
    bits = _mask_bits(net, mask)
    keep = keep_vectors(net, bits)
    for lid in net.topo_order():
        layer = net.layer(lid)
        if layer.kind in WEIGHTED and not keep[lid].any():
            raise EmptyLayerError(lid)

    new_layers = []
    for layer in net.layers:
        out_keep = keep[layer.id]
        ins = net.inputs_of(layer.id)
        in_keep = keep[ins[0]] if ins else np.ones(layer.in_channels, dtype=bool)
        changes: dict = {"in_channels": int(in_keep.sum()), "out_channels": int(out_keep.sum())}
        if layer.kind == LayerKind.INPUT:
            changes = {}
        elif layer.kind == LayerKind.CONV2D:
            changes["weights"] = layer.weights[out_keep][:, in_keep].copy()
        elif layer.kind == LayerKind.LINEAR:
            changes["weights"] = layer.weights[out_keep][:, in_keep].copy()
        elif layer.kind == LayerKind.FLATTEN:
            src = net.layer(ins[0])
            changes["in_channels"] = int(keep[src.id].sum())
        for name in ("bias", "running_mean", "running_var"):
            value = getattr(layer, name)
            if value is not None:
                changes[name] = value[out_keep].copy()
        if layer.kind == LayerKind.BATCHNORM and layer.weights is not None:
            changes["weights"] = layer.weights[out_keep].copy()
        new_layers.append(replace(layer, **changes))
    return NetworkSpec(tuple(new_layers), net.edges, net.input_resolution)
