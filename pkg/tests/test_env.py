from __future__ import annotations

import itertools

import numpy as np
import pytest

from graphprune import zoo
from graphprune.env import (
    EmaTracker,
    EnvConfig,
    PerformanceGuaranteed,
    PruningEnv,
    ResourceConstrained,
    compute_reward,
    ema_update,
    episode_json,
    episode_record,
    phase,
    sgn,
)
from graphprune.errors import EpisodeFinishedError, OracleUnavailableError, ShapeMismatchError
from graphprune.evalnet import AccuracyReport
from graphprune.netmodel import WEIGHTED, PruningMask, flops


class StubOracle:
    """Accuracy falls linearly with the fraction of pruned units."""

    def __init__(self, base=0.9):
        self.base = base
        self.calls = 0

    def evaluate(self, mask):
        self.calls += 1
        s = 0.0 if mask is None else mask.sparsity
        return AccuracyReport(self.base * (1.0 - 0.5 * s), 100, 0.0)

    def edge_activation_l1(self):
        return None


@pytest.fixture(scope="module")
def toy():
    return zoo.toy_cnn(0)


def make_env(net, n=4, mode=None, oracle=None):
    cfg = EnvConfig(mode or ResourceConstrained(0.5), n_groups=n)
    return PruningEnv(net, cfg, oracle or StubOracle())


def tracker(acc_ema, flops_ema):
    return EmaTracker(acc_ema, flops_ema, 0.9)


def test_sgn_is_three_valued():
    assert (sgn(2.5), sgn(-0.1), sgn(0.0)) == (1, -1, 0)


def test_reward_examples():
    rc = ResourceConstrained(0.5)
    assert compute_reward(rc, 0.0, 0.8, tracker(0.0, 0.9)) == 1
    assert compute_reward(rc, 0.72, 0.4, tracker(0.70, 1.0)) == 1
    assert compute_reward(rc, 0.70, 0.4, tracker(0.70, 1.0)) == 0
    assert compute_reward(PerformanceGuaranteed(0.8), 0.75, 0.5, tracker(0.70, 1.0)) == 1


# Hand-written table: (mode, position vs target, comparison vs EMA) -> reward.
# RC target F=0.5 (feasible at F <= 0.5); PG target acc=0.8 (feasible at acc >= 0.8).
TRUTH = {
    ("rc", "above", "above"): -1,  # F=0.6 infeasible, F worse than F_EMA
    ("rc", "above", "below"): 1,
    ("rc", "above", "equal"): 0,
    ("rc", "below", "above"): 1,  # feasible: acc compared, acc above Acc_EMA
    ("rc", "below", "below"): -1,
    ("rc", "below", "equal"): 0,
    ("rc", "at", "above"): 1,
    ("rc", "at", "below"): -1,
    ("rc", "at", "equal"): 0,
    ("pg", "above", "above"): -1,  # feasible: FLOPs compared, F above F_EMA
    ("pg", "above", "below"): 1,
    ("pg", "above", "equal"): 0,
    ("pg", "below", "above"): 1,  # infeasible: acc compared
    ("pg", "below", "below"): -1,
    ("pg", "below", "equal"): 0,
    ("pg", "at", "above"): -1,
    ("pg", "at", "below"): 1,
    ("pg", "at", "equal"): 0,
}


@pytest.mark.parametrize("key", sorted(TRUTH))
def test_reward_truth_table(key):
    mode_name, pos, cmp = key
    delta = {"above": 0.05, "below": -0.05, "equal": 0.0}[cmp]
    if mode_name == "rc":
        mode = ResourceConstrained(0.5)
        f = {"above": 0.6, "below": 0.4, "at": 0.5}[pos]
        acc = 0.7
        # the statistic that matters is F when infeasible, acc otherwise
        t = tracker(acc, f - delta) if pos == "above" else tracker(acc - delta, 0.55)
    else:
        mode = PerformanceGuaranteed(0.8)
        acc = {"above": 0.85, "below": 0.75, "at": 0.8}[pos]
        f = 0.5
        t = tracker(acc, f - delta) if pos != "below" else tracker(acc - delta, 0.5)
    assert compute_reward(mode, acc, f, t) == TRUTH[key]


def test_infeasible_rc_reward_ignores_accuracy():
    rc = ResourceConstrained(0.5)
    t = tracker(0.7, 0.8)
    assert {compute_reward(rc, a, 0.7, t) for a in np.linspace(0, 1, 11)} == {1}


def test_feasible_reward_flips_with_accuracy():
    rc = ResourceConstrained(0.5)
    t = tracker(0.7, 0.8)
    assert compute_reward(rc, 0.75, 0.3, t) == -compute_reward(rc, 0.65, 0.3, t)


def test_phase_labels():
    assert phase(ResourceConstrained(0.5), 0.9, 0.6) == "flops"
    assert phase(ResourceConstrained(0.5), 0.9, 0.5) == "acc"
    assert phase(PerformanceGuaranteed(0.8), 0.79, 0.1) == "acc"
    assert phase(PerformanceGuaranteed(0.8), 0.8, 0.1) == "flops"


def test_ema_update_examples():
    t = ema_update(EmaTracker(0.5, 0.5, 0.9), 0.7, 0.5)
    assert t.acc_ema == pytest.approx(0.52, abs=1e-12)
    assert t.flops_ema == 0.5
    t = EmaTracker(0.0, 1.0, 0.9)
    seen = [t.acc_ema]
    for _ in range(200):
        seen.append(ema_update(t, 0.3, 0.2).acc_ema)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == pytest.approx(0.3, abs=1e-8)


def test_mode_targets_validated():
    with pytest.raises(ValueError):
        ResourceConstrained(0.0)
    with pytest.raises(ValueError):
        PerformanceGuaranteed(1.5)


def test_reset_requires_oracle(toy):
    env = PruningEnv(toy, EnvConfig(ResourceConstrained(0.5)), None)
    with pytest.raises(OracleUnavailableError):
        env.reset()


def test_reset_observation(toy):
    env = make_env(toy)
    obs = env.reset()
    assert env.state.mask.sparsity == 0.0
    assert env.tracker.flops_ema == 1.0
    assert env.tracker.acc_ema == pytest.approx(0.9)
    assert np.array_equal(obs.node_features, env.reset().node_features)
    # marker slots cover group 0 exactly
    c_max = toy.c_max
    markers = obs.node_features[:, -c_max:]
    marked = set()
    for i, layer in enumerate(toy.layers):
        if layer.kind in WEIGHTED:
            units = toy.indexing.layer_units[layer.id]
            marked |= {u for u, m in zip(units, markers[i]) if m}
    assert marked == set(env.groups[0])


def test_n4_rewards_only_at_end(toy):
    env = make_env(toy, n=4)
    env.reset()
    for g in range(4):
        _, r, done = env.step(np.zeros(len(env.groups[g]), bool))
        assert done == (g == 3)
        if g < 3:
            assert r == 0
    assert env.measurement.flops_ratio == 1.0
    assert env.measurement.acc_ep == pytest.approx(0.9)
    with pytest.raises(EpisodeFinishedError):
        env.step(np.zeros(len(env.groups[0]), bool))


def test_n1_single_step_is_terminal(toy):
    env = make_env(toy, n=1)
    env.reset()
    rng = np.random.default_rng(0)
    _, r, done = env.step(rng.random(toy.indexing.C) < 0.6)
    assert done and r in (-1, 0, 1)
    assert env.result.reward == r


def test_action_shape_checked(toy):
    env = make_env(toy)
    env.reset()
    with pytest.raises(ShapeMismatchError):
        env.step(np.zeros(3, bool))


def test_pruning_everything_keeps_one_unit_per_layer(toy):
    env = make_env(toy, n=2)
    m = env.run([np.ones(len(g), bool) for g in env.groups])
    layer_units = {l.id: toy.indexing.units_of_layer(l.id) for l in toy.layers if l.kind in WEIGHTED}
    for units in layer_units.values():
        if units.size == 0:
            continue
        kept = units[~m.mask.bits[units]]
        assert kept.size >= 1
    assert m.forced_keeps >= 1
    assert flops(toy, m.mask) > 0


def test_protection_keeps_highest_norm_unit(toy):
    env = make_env(toy, n=1)
    env.reset()
    env.step(np.ones(toy.indexing.C, bool))
    norms = env.unit_norms
    for l in toy.layers:
        if l.kind not in WEIGHTED:
            continue
        units = toy.indexing.units_of_layer(l.id)
        if units.size == 0:  # classifier outputs are not prunable
            continue
        kept = units[~env.state.mask.bits[units]]
        assert norms[kept].max() == norms[units].max()


def test_mask_monotone_within_episode(toy):
    env = make_env(toy, n=4)
    rng = np.random.default_rng(3)
    env.reset()
    prev = env.state.mask.bits.copy()
    for g in env.groups:
        env.step(rng.random(len(g)) < 0.9)
        now = env.state.mask.bits
        assert not (prev & ~now).any()
        prev = now.copy()


def test_episode_stream_deterministic(toy):
    def stream():
        env = make_env(toy, n=4)
        rng = np.random.default_rng(7)
        lines = []
        for i in range(6):
            env.run([rng.random(len(g)) < 0.4 for g in env.groups])
            lines.append(episode_json(episode_record(i, env.config.mode, env.result)))
        return lines

    assert stream() == stream()


def test_episode_record_field_order(toy):
    env = make_env(toy)
    env.run([np.zeros(len(g), bool) for g in env.groups])
    rec = episode_record(0, env.config.mode, env.result)
    assert list(rec) == [
        "episode", "mode", "phase", "acc_ep", "flops_ratio", "reward",
        "acc_ema", "flops_ema", "sparsity", "forced_keeps", "wall_ms",
    ]
    assert rec["wall_ms"] is None
    assert episode_record(0, env.config.mode, env.result, timing=True)["wall_ms"] is not None


def test_ema_updates_every_episode(toy):
    env = make_env(toy, n=1)
    rng = np.random.default_rng(0)
    for _ in range(3):
        before = env.tracker.snapshot() if env.tracker else (0.9, 1.0)
        m = env.run([rng.random(toy.indexing.C) < 0.3])
        acc_ema, f_ema = env.tracker.snapshot()
        assert f_ema == pytest.approx(0.9 * before[1] + 0.1 * m.flops_ratio)
        assert acc_ema == pytest.approx(0.9 * before[0] + 0.1 * m.acc_ep)


def test_deferred_reward_leaves_tracker_alone(toy):
    env = PruningEnv(toy, EnvConfig(ResourceConstrained(0.5), n_groups=2), StubOracle(), defer_reward=True)
    m = env.run([np.ones(len(g), bool) for g in env.groups])
    assert env.result is None and m is not None
    assert env.tracker.snapshot() == (pytest.approx(0.9), 1.0)
