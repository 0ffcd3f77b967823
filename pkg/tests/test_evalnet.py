from __future__ import annotations

import dataclasses
import stat
import sys
import textwrap

import numpy as np
import pytest

from graphprune import evalnet, zoo
from graphprune.errors import EmptyDatasetError, OracleProtocolError, ShapeMismatchError
from graphprune.evalnet import Dataset, ExternalOracle, accuracy, count_macs, external_oracle, forward, forward_masked, predict
from graphprune.formats import save_mask
from graphprune.netmodel import LayerKind, PruningMask, apply_mask, flops

from conftest import viable_mask


def batch_for(net, rng, n=4):
    return rng.standard_normal((n, *net.input_resolution)).astype(np.float32)


@pytest.mark.parametrize("make", [lambda: zoo.chain_net(0), lambda: zoo.toy_cnn(0)], ids=["chain", "residual"])
def test_masked_forward_matches_physical_removal(make, rng):
    net = make()
    x = batch_for(net, rng, 8)
    for _ in range(20):
        mask = viable_mask(net, rng)
        a = forward_masked(net, mask, x)
        b = forward(apply_mask(net, mask), x)
        assert np.abs(a - b).max() < 1e-4


def test_empty_mask_is_plain_forward(rng):
    net = zoo.toy_cnn(1)
    x = batch_for(net, rng)
    assert np.array_equal(forward_masked(net, PruningMask.empty(net.indexing.C), x), forward(net, x))


def test_all_but_one_unit_is_finite(rng):
    net = zoo.toy_cnn(2)
    bits = np.zeros(net.indexing.C, bool)
    conv = next(l for l in net.layers if l.kind == LayerKind.CONV2D)
    units = net.indexing.units_of_layer(conv.id)
    bits[units[1:]] = True
    x = batch_for(net, rng)
    a = forward_masked(net, PruningMask(bits), x)
    assert np.isfinite(a).all() and np.array_equal(a, forward_masked(net, PruningMask(bits), x))


def test_batch_shape_checked():
    net = zoo.toy_cnn(0)
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((1, 3, 8, 8), np.float32))


@pytest.mark.parametrize("seed", range(5))
def test_analytic_flops_equal_counted_macs(seed):
    rng = np.random.default_rng(seed)
    net = zoo.random_net(rng)
    x = batch_for(net, rng, 2)
    assert flops(net) == 2 * count_macs(net, x)
    for _ in range(10):
        mask = viable_mask(net, rng)
        assert flops(net, mask) == 2 * count_macs(apply_mask(net, mask), x)


def test_argmax_ties_go_to_lowest_class():
    logits = np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0], [2.0, 1.0, 2.0]])
    assert predict(logits).tolist() == [1, 0, 0]


def test_constant_logits_score_first_class_share(splits):
    net = zoo.toy_cnn(0)
    layers = tuple(
        dataclasses.replace(l, weights=np.zeros_like(l.weights), bias=np.zeros_like(l.bias))
        if l.kind == LayerKind.LINEAR else l
        for l in net.layers
    )
    flat = dataclasses.replace(net, layers=layers)
    _, val = splits
    assert accuracy(flat, None, val).top1 == pytest.approx(np.mean(val.labels == 0))


def test_untrained_accuracy_near_chance(splits):
    _, val = splits
    scores = [accuracy(zoo.toy_cnn(s), None, val).top1 for s in range(10)]
    assert all(0.05 <= s <= 0.18 for s in scores), scores


def test_accuracy_is_pure(splits, trained_toy):
    _, val = splits
    net = trained_toy[0]
    mask = viable_mask(net, np.random.default_rng(0))
    a, b = accuracy(net, mask, val), accuracy(net, mask, val)
    assert a.top1 == b.top1 and a.n_samples == len(val)
    assert a.top1 * a.n_samples == pytest.approx(round(a.top1 * a.n_samples))


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDatasetError):
        Dataset(np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64), 10)


def test_synth_dataset_deterministic_and_balanced():
    a = evalnet.synth_arrays(5, 20, 16)
    b = evalnet.synth_arrays(5, 20, 16)
    assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])
    assert np.bincount(a[1], minlength=10).tolist() == [20] * 10
    train, val = evalnet.make_splits(*a, 10)
    assert np.bincount(train.labels, minlength=10).tolist() == [16] * 10
    assert np.bincount(val.labels, minlength=10).tolist() == [4] * 10
    assert not np.array_equal(evalnet.synth_arrays(6, 20, 16)[0], a[0])


def test_three_nearest_neighbours_learn_the_data(splits):
    train, val = splits
    xt = train.images.reshape(len(train), -1).astype(np.float64)
    xv = val.images.reshape(len(val), -1).astype(np.float64)
    d = (xv**2).sum(1)[:, None] - 2 * xv @ xt.T + (xt**2).sum(1)[None, :]
    nn3 = np.argsort(d, axis=1, kind="stable")[:, :3]
    votes = train.labels[nn3]
    pred = np.array([np.bincount(v, minlength=10).argmax() for v in votes])
    assert np.mean(pred == val.labels) >= 0.6


def test_trained_baseline_reaches_target(trained_toy, splits):
    net, history = trained_toy
    assert history[-1]["val_top1"] >= 0.85
    assert accuracy(net, None, splits[1]).top1 == pytest.approx(history[-1]["val_top1"])


def test_zero_epochs_leave_weights_unchanged(splits):
    net = zoo.toy_cnn(3)
    out, history = evalnet.train_baseline(net, splits[0], 0)
    assert history == []
    for a, b in zip(net.layers, out.layers):
        for k, v in a.tensors().items():
            assert np.array_equal(v, b.tensors()[k])


@pytest.mark.parametrize("seed", range(3))
def test_doubling_epochs_keeps_train_accuracy(seed):
    train, _ = evalnet.synth_dataset(seed, 30, 16)
    _, short = evalnet.train_baseline(zoo.toy_cnn(seed), train, 3, seed=seed)
    _, long = evalnet.train_baseline(zoo.toy_cnn(seed), train, 6, seed=seed)
    assert long[-1]["train_top1"] >= short[-1]["train_top1"] - 0.02


def _stub(tmp_path, body: str) -> str:
    path = tmp_path / "oracle.py"
    path.write_text(textwrap.dedent(body))
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return f"{sys.executable} {path}"


@pytest.fixture
def mask_file(tmp_path):
    path = tmp_path / "m.gsccm"
    save_mask(path, PruningMask(np.array([True, False, True])))
    return path


def test_external_oracle_echo(tmp_path, mask_file):
    cmd = _stub(tmp_path, "print('0.5')\n")
    assert external_oracle(cmd, mask_file).top1 == 0.5


@pytest.mark.parametrize("out", ["1.5", "-0.1", "abc", "0.5 0.6", ""])
def test_external_oracle_rejects_bad_output(tmp_path, mask_file, out):
    cmd = _stub(tmp_path, f"print({out!r})\n")
    with pytest.raises(OracleProtocolError):
        external_oracle(cmd, mask_file)


def test_external_oracle_exit_code(tmp_path, mask_file):
    cmd = _stub(tmp_path, "import sys\nsys.exit(7)\n")
    with pytest.raises(OracleProtocolError) as info:
        external_oracle(cmd, mask_file)
    assert info.value.exit_code == 7


def test_external_oracle_timeout(tmp_path, mask_file):
    cmd = _stub(tmp_path, "import time\ntime.sleep(5)\n")
    with pytest.raises(OracleProtocolError):
        external_oracle(cmd, mask_file, timeout=0.5)


def test_external_oracle_reads_mask(tmp_path):
    cmd = _stub(tmp_path, """
        import sys
        from graphprune.formats import load_mask
        m = load_mask(sys.argv[1])
        print(1.0 - m.sparsity)
    """)
    oracle = ExternalOracle(cmd, workdir=tmp_path)
    assert oracle.evaluate(PruningMask(np.array([True, False, False, False]))).top1 == 0.75
    assert oracle.edge_activation_l1() is None


def test_builtin_oracle_baseline_matches_accuracy(trained_toy, splits):
    net, _ = trained_toy
    oracle = evalnet.BuiltinOracle(net, splits[1], subset=100)
    assert oracle.evaluate(None).top1 == accuracy(net, None, splits[1].head(100)).top1
    l1 = oracle.edge_activation_l1()
    assert len(l1) == len(net.edges) and all(v >= 0 for v in l1)
