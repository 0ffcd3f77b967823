from __future__ import annotations

import numpy as np
import pytest
import torch

from graphprune import evalnet, zoo

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def splits():
    return evalnet.synth_dataset(0, 200, 16)


@pytest.fixture(scope="session")
def trained_toy(splits):
    train, val = splits
    net, history = evalnet.train_baseline(zoo.toy_cnn(0), train, 20, seed=0, val=val)
    return net, history


@pytest.fixture(scope="session")
def toy_oracle(trained_toy, splits):
    return evalnet.BuiltinOracle(trained_toy[0], splits[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(net, rng, p=None):
    from graphprune.netmodel import PruningMask

    p = rng.uniform(0.1, 0.6) if p is None else p
    return PruningMask(rng.random(net.indexing.C) < p)


def viable_mask(net, rng, p=None):
    """Random mask that leaves every weighted layer at least one unit."""
    from graphprune.esbase import repair_empty_layers

    return repair_empty_layers(net, random_mask(net, rng, p))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
