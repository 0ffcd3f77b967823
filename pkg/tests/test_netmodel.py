from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphprune import zoo
from graphprune.errors import (
    EmptyLayerError,
    InvalidGroupCountError,
    MaskLengthError,
    NonDagError,
    PaddingOverflowError,
    UnsupportedLayerError,
)
from graphprune.netmodel import (
    N_COMPUTATIONAL,
    N_STRUCTURAL,
    EdgeKind,
    LayerKind,
    LayerSpec,
    NetworkSpec,
    PruningMask,
    apply_mask,
    build_graph,
    channel_l1_norms,
    flops,
    group_partition,
    keep_vectors,
    param_count,
)
from graphprune.zoo import NetBuilder


def conv_net(in_ch=3, out=16, res=8):
    b = NetBuilder((in_ch, res, res), np.random.default_rng(0))
    x = b.conv(b.input_id, out)
    x = b.flatten(b.pool(x))
    b.output(b.linear(x, 10, prunable=False))
    return b.build()


def chained_blocks():
    b = NetBuilder((3, 8, 8), np.random.default_rng(0))
    trunk = b.conv(b.input_id, 16, relu=True)
    y = b.conv(trunk, 16)
    a1 = b.add(y, trunk, relu=True)
    y2 = b.conv(a1, 16)
    a2 = b.add(y2, a1, relu=True)
    b.output(b.linear(b.flatten(b.pool(a2)), 10, prunable=False))
    return b.build()


def components_oracle(net):
    """Connected components over (producer layer, channel) nodes linked through Add inputs."""
    origin = {}  # layer -> list of producers whose channels flow in unchanged
    for lid in net.topo_order():
        layer = net.layer(lid)
        ins = net.inputs_of(lid)
        if layer.kind in (LayerKind.INPUT, LayerKind.CONV2D, LayerKind.LINEAR, LayerKind.FLATTEN):
            origin[lid] = [lid]
        elif layer.kind == LayerKind.ADD:
            origin[lid] = origin[ins[0]] + origin[ins[1]]
        else:
            origin[lid] = origin[ins[0]]
    adj = {}
    for lid in net.topo_order():
        if net.layer(lid).kind == LayerKind.ADD:
            ps = origin[lid]
            for ch in range(net.layer(lid).out_channels):
                for p in ps:
                    for q in ps:
                        adj.setdefault((p, ch), set()).add((q, ch))
    nodes = [(l.id, ch) for l in net.layers if l.kind in (LayerKind.CONV2D, LayerKind.LINEAR) and l.prunable
             for ch in range(l.out_channels)]
    seen, comps = set(), []
    for n in nodes:
        if n in seen:
            continue
        stack, comp = [n], set()
        while stack:
            v = stack.pop()
            if v in comp:
                continue
            comp.add(v)
            stack.extend(adj.get(v, ()))
        seen |= comp
        comps.append(frozenset(comp))
    return set(comps)


def test_chain_units_are_singletons():
    net = zoo.chain_net(0, widths=(16, 32))
    idx = net.indexing
    assert idx.C == 48
    assert all(len(u) == 1 for u in idx.units)


def test_residual_block_pairs_channels():
    b = NetBuilder((3, 8, 8), np.random.default_rng(0))
    x = b.conv(b.input_id, 8)
    conv_b = b.conv(x, 16)
    conv_s = b.conv(x, 16, kernel=1)
    b.output(b.linear(b.flatten(b.pool(b.add(conv_b, conv_s))), 4, prunable=False))
    idx = b.build().indexing
    pairs = [u for u in idx.units if len(u) == 2]
    assert len(pairs) == 16
    assert all({lid for lid, _ in u} == {conv_b, conv_s} for u in pairs)


def test_chained_blocks_couple_three_layers():
    net = chained_blocks()
    idx = net.indexing
    assert idx.C == 16
    assert all(len(u) == 3 for u in idx.units)
    assert {frozenset(u) for u in idx.units} == components_oracle(net)


def test_toy_cnn_units_match_components():
    net = zoo.toy_cnn(0)
    idx = net.indexing
    assert idx.C == 48
    assert sorted(len(u) for u in idx.units) == [1] * 16 + [2] * 32
    assert {frozenset(u) for u in idx.units} == components_oracle(net)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_units_match_components_random(seed):
    net = zoo.random_net(np.random.default_rng(seed))
    assert {frozenset(u) for u in net.indexing.units} == components_oracle(net)


def test_cycle_rejected():
    layers = (
        LayerSpec(0, LayerKind.INPUT, 1, 1),
        LayerSpec(1, LayerKind.POOL, 1, 1),
        LayerSpec(2, LayerKind.OUTPUT, 1, 1),
    )
    net = NetworkSpec(layers, ((0, 1, EdgeKind.REGULAR), (1, 2, EdgeKind.REGULAR), (2, 1, EdgeKind.REGULAR)), (1, 4, 4))
    with pytest.raises(NonDagError):
        net.topo_order()


def test_channel_l1_norms():
    ones = LayerSpec(1, LayerKind.CONV2D, 2, 4, kernel=(3, 3), weights=np.ones((4, 2, 3, 3), np.float32))
    assert np.allclose(channel_l1_norms(ones), 18.0)
    zeros = LayerSpec(1, LayerKind.LINEAR, 3, 2, weights=np.zeros((2, 3), np.float32))
    assert np.all(channel_l1_norms(zeros) == 0)
    w = np.zeros((2, 3), np.float32)
    w[0] = [0.5, -0.25, 0.25]
    assert channel_l1_norms(LayerSpec(1, LayerKind.LINEAR, 3, 2, weights=w))[0] == pytest.approx(1.0)
    with pytest.raises(UnsupportedLayerError):
        channel_l1_norms(LayerSpec(1, LayerKind.POOL, 3, 3))


def test_flops_single_conv():
    net = conv_net()
    conv = net.layer(1)
    assert flops(net) - 2 * 16 * 10 == 55_296
    bits = np.zeros(net.indexing.C, bool)
    bits[:8] = True
    after = flops(net, PruningMask(bits))
    assert after - 2 * 8 * 10 == 27_648
    assert conv.spatial_out == (8, 8)


def test_toy_flops_by_hand():
    net = zoo.toy_cnn(0)
    assert flops(net) == 221_184 + 589_824 + 1_179_648 + 640
    assert flops(net, PruningMask.empty(net.indexing.C)) == flops(net)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_flops_monotone_per_flip(seed):
    rng = np.random.default_rng(seed)
    net = zoo.random_net(rng)
    bits = np.zeros(net.indexing.C, bool)
    prev = flops(net, bits)
    for u in rng.permutation(net.indexing.C):
        bits[u] = True
        now = flops(net, bits)
        assert now <= prev
        prev = now


def test_mask_length_checked():
    net = zoo.toy_cnn(0)
    with pytest.raises(MaskLengthError):
        flops(net, PruningMask.empty(3))


def test_param_count_linear():
    b = NetBuilder((4, 1, 1), np.random.default_rng(0))
    x = b.flatten(b.input_id)
    b.output(b.linear(x, 3, prunable=True))
    net = b.build()
    assert param_count(net) == 15
    assert param_count(net, PruningMask([True, False, False])) == 10


def test_param_count_matches_tensor_sizes():
    net = zoo.chain_net(3)
    expected = sum(v.size for l in net.layers for k, v in l.tensors().items() if k in ("weights", "bias"))
    assert param_count(net) == expected


@pytest.mark.parametrize("C,n,sizes", [(12, 4, [3, 3, 3, 3]), (10, 4, [3, 3, 2, 2]), (5, 1, [5]), (48, 4, [12] * 4)])
def test_group_partition(C, n, sizes):
    groups = group_partition(C, n)
    assert [len(g) for g in groups] == sizes
    assert [u for g in groups for u in g] == list(range(C))


@pytest.mark.parametrize("C,n", [(4, 0), (4, 5)])
def test_group_partition_invalid(C, n):
    with pytest.raises(InvalidGroupCountError):
        group_partition(C, n)


def test_build_graph_shapes_chain():
    b = NetBuilder((3, 8, 8), np.random.default_rng(0))
    x = b.flatten(b.input_id)
    b.output(b.linear(x, 5, prunable=True))
    net = b.build()
    obs = build_graph(net, None)
    assert obs.node_features.shape == (4, N_STRUCTURAL + N_COMPUTATIONAL + 2 * 5)
    assert obs.edge_index.shape == (3, 2)


def test_build_graph_pruned_slot_zeroed():
    net = zoo.toy_cnn(0)
    u = 3
    (lid, ch), = net.indexing.units[u]
    bits = np.zeros(net.indexing.C, bool)
    bits[u] = True
    obs = build_graph(net, PruningMask(bits))
    row = net.position(lid)
    base = N_STRUCTURAL + N_COMPUTATIONAL
    assert obs.node_features[row, base + ch] == 0
    assert obs.node_features[row, base + ch + 1] > 0
    assert obs.node_features[row, N_STRUCTURAL] < 1.0


def test_build_graph_marker_and_residual_edges():
    net = zoo.toy_cnn(0)
    groups = group_partition(net.indexing.C, 4)
    obs = build_graph(net, None, groups[1])
    base = N_STRUCTURAL + N_COMPUTATIONAL + net.c_max
    marked = set()
    for row, lid in enumerate(obs.node_layer_map):
        units = net.indexing.layer_units[lid]
        layer = net.layer(lid)
        if layer.kind in (LayerKind.CONV2D, LayerKind.LINEAR):
            for ch in np.flatnonzero(obs.node_features[row, base : base + layer.out_channels]):
                marked.add(int(units[ch]))
    assert marked == set(groups[1])
    residual = [k for k, (_, _, kind) in enumerate(net.edges) if kind == EdgeKind.RESIDUAL]
    assert len(residual) == 1
    assert obs.edge_features[:, 2].sum() == 1 and obs.edge_features[residual[0], 2] == 1


def test_build_graph_deterministic_and_overflow():
    net = zoo.toy_cnn(0)
    a, b = build_graph(net, None, [0, 1]), build_graph(net, None, [0, 1])
    assert np.array_equal(a.node_features, b.node_features)
    with pytest.raises(PaddingOverflowError):
        build_graph(net, None, c_max=8)


def test_apply_mask_identity_and_slicing():
    net = zoo.toy_cnn(0)
    same = apply_mask(net, None)
    assert [l.out_channels for l in same.layers] == [l.out_channels for l in net.layers]
    bits = np.zeros(net.indexing.C, bool)
    bits[2] = True  # conv1 channel 2
    pruned = apply_mask(net, PruningMask(bits))
    assert pruned.layer(1).out_channels == 15
    assert pruned.layer(3).in_channels == 15


def test_apply_mask_coupled_unit_removes_all_members():
    net = zoo.toy_cnn(0)
    u = next(i for i, unit in enumerate(net.indexing.units) if len(unit) == 2)
    bits = np.zeros(net.indexing.C, bool)
    bits[u] = True
    pruned = apply_mask(net, PruningMask(bits))
    for lid, _ in net.indexing.units[u]:
        assert pruned.layer(lid).out_channels == net.layer(lid).out_channels - 1


def test_apply_mask_empty_layer_error():
    net = zoo.toy_cnn(0)
    bits = np.zeros(net.indexing.C, bool)
    bits[:16] = True
    with pytest.raises(EmptyLayerError) as info:
        apply_mask(net, PruningMask(bits))
    assert info.value.layer_id == 1


def test_keep_vectors_flatten_follows_source():
    net = zoo.chain_net(0, widths=(4, 6), resolution=8)
    bits = np.zeros(net.indexing.C, bool)
    bits[4 + 2] = True
    keep = keep_vectors(net, bits)
    flat = next(l.id for l in net.layers if l.kind == LayerKind.FLATTEN)
    assert keep[flat].sum() == keep[flat].size - 1
