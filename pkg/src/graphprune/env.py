"""Pruning environment with grouped binary actions and a self-competition reward.

An episode walks over ``n_groups`` contiguous groups of decision units.  Each
step prunes a subset of the current group; after the last group the oracle
measures accuracy of the masked network and the episode is scored against
exponential moving averages of past episodes.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Protocol, Union

import numpy as np

from .errors import EpisodeFinishedError, OracleUnavailableError, ShapeMismatchError
from .netmodel import (
    WEIGHTED,
    GraphObservation,
    NetworkSpec,
    PruningMask,
    build_graph,
    flops,
    group_partition,
    keep_vectors,
    unit_l1_norms,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResourceConstrained:
    """Maximise accuracy subject to ``flops_ratio <= flops_target``."""

    flops_target: float
    name = "resource"

    def __post_init__(self):
        if not 0.0 < self.flops_target <= 1.0:
            raise ValueError("flops_target must lie in (0, 1]")

    def feasible(self, acc: float, flops_ratio: float) -> bool:
        return flops_ratio <= self.flops_target


@dataclass(frozen=True)
class PerformanceGuaranteed:
    """Minimise FLOPs subject to ``acc >= acc_target``."""

    acc_target: float
    name = "performance"

    def __post_init__(self):
        if not 0.0 < self.acc_target <= 1.0:
            raise ValueError("acc_target must lie in (0, 1]")

    def feasible(self, acc: float, flops_ratio: float) -> bool:
        return acc >= self.acc_target


Mode = Union[ResourceConstrained, PerformanceGuaranteed]


class Oracle(Protocol):
    def evaluate(self, mask: PruningMask | None): ...

    def edge_activation_l1(self) -> list[float] | None: ...


@dataclass
class EnvConfig:
    mode: Mode
    n_groups: int = 4
    ema_beta: float = 0.9
    seed: int = 0
    calibration_batch: int = 64


def sgn(x: float) -> int:
    return (x > 0) - (x < 0)


class EmaTracker:
    """Historical averages the agent competes against; updates are serialised."""

    def __init__(self, acc_ema: float, flops_ema: float = 1.0, beta: float = 0.9):
        self.acc_ema = float(acc_ema)
        self.flops_ema = float(flops_ema)
        self.beta = float(beta)
        self.lock = threading.Lock()

    def snapshot(self) -> tuple[float, float]:
        return self.acc_ema, self.flops_ema


def ema_update(tracker: EmaTracker, acc_ep: float, flops_ratio: float) -> EmaTracker:
    b = tracker.beta
    tracker.acc_ema = b * tracker.acc_ema + (1.0 - b) * acc_ep
    tracker.flops_ema = b * tracker.flops_ema + (1.0 - b) * flops_ratio
    return tracker


def phase(mode: Mode, acc_ep: float, flops_ratio: float) -> str:
    """Which statistic the reward compares: ``"flops"`` or ``"acc"``."""
    if isinstance(mode, ResourceConstrained):
        return "flops" if flops_ratio > mode.flops_target else "acc"
    return "acc" if acc_ep < mode.acc_target else "flops"


def compute_reward(mode: Mode, acc_ep: float, flops_ratio: float, tracker: EmaTracker) -> int:
    if phase(mode, acc_ep, flops_ratio) == "flops":
        return -sgn(flops_ratio - tracker.flops_ema)
    return sgn(acc_ep - tracker.acc_ema)


@dataclass
class Measurement:
    """Terminal measurements of one episode, before it is scored."""

    mask: PruningMask
    acc_ep: float
    flops_ratio: float
    forced_keeps: int
    wall_ms: float


@dataclass
class EpisodeResult:
    mask: PruningMask
    acc_ep: float
    flops_ratio: float
    reward: int
    phase: str
    acc_ema: float
    flops_ema: float
    forced_keeps: int = 0
    wall_ms: float = 0.0


EPISODE_FIELDS = (
    "episode", "mode", "phase", "acc_ep", "flops_ratio", "reward",
    "acc_ema", "flops_ema", "sparsity", "forced_keeps", "wall_ms",
)


def episode_record(index: int, mode: Mode, result: EpisodeResult, timing: bool = False) -> dict:
    values = (
        index, mode.name, result.phase, result.acc_ep, result.flops_ratio, result.reward,
        result.acc_ema, result.flops_ema, result.mask.sparsity, result.forced_keeps,
        round(result.wall_ms, 3) if timing else None,
    )
    return dict(zip(EPISODE_FIELDS, values))


def episode_json(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def settle(mode: Mode, tracker: EmaTracker, m: Measurement) -> EpisodeResult:
    """Score an episode against the tracker, then fold it into the averages."""
    with tracker.lock:
        reward = compute_reward(mode, m.acc_ep, m.flops_ratio, tracker)
        ema_update(tracker, m.acc_ep, m.flops_ratio)
        return EpisodeResult(
            m.mask, m.acc_ep, m.flops_ratio, reward, phase(mode, m.acc_ep, m.flops_ratio),
            tracker.acc_ema, tracker.flops_ema, m.forced_keeps, m.wall_ms,
        )


@dataclass
class Calibration:
    baseline_acc: float
    edge_l1: list[float] | None


def calibrate(oracle: Oracle | None) -> Calibration:
    if oracle is None:
        raise OracleUnavailableError("no accuracy oracle attached")
    return Calibration(float(oracle.evaluate(None).top1), oracle.edge_activation_l1())


@dataclass
class EnvState:
    mask: PruningMask
    group_cursor: int = 0
    forced_keeps: int = 0
    done: bool = False


class PruningEnv:
    """Deterministic episodic environment over one network.

    With ``defer_reward=True`` the terminal step only measures the episode
    (see :attr:`measurement`); the caller scores it later with :func:`settle`,
    which lets parallel rollouts update the shared tracker in episode order.
    """

    def __init__(
        self,
        net: NetworkSpec,
        config: EnvConfig,
        oracle: Oracle | None,
        tracker: EmaTracker | None = None,
        calibration: Calibration | None = None,
        defer_reward: bool = False,
    ):
        self.net = net
        self.config = config
        self.oracle = oracle
        self.tracker = tracker
        self.calibration = calibration
        self.defer_reward = defer_reward
        self.C = net.indexing.C
        self.groups = group_partition(self.C, config.n_groups)
        self.max_group = len(self.groups[0])
        self.original_flops = flops(net)
        self.unit_norms = unit_l1_norms(net)
        self._layer_units = {
            l.id: net.indexing.units_of_layer(l.id) for l in net.layers if l.kind in WEIGHTED
        }
        self.state: EnvState | None = None
        self.measurement: Measurement | None = None
        self.result: EpisodeResult | None = None
        self._t0 = 0.0

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def observe(self) -> GraphObservation:
        s = self.state
        marker = self.groups[s.group_cursor] if not s.done else ()
        return build_graph(self.net, s.mask, marker, self.calibration.edge_l1)

    def reset(self) -> GraphObservation:
        if self.oracle is None:
            raise OracleUnavailableError("no accuracy oracle attached")
        if self.calibration is None:
            self.calibration = calibrate(self.oracle)
        if self.tracker is None:
            self.tracker = EmaTracker(self.calibration.baseline_acc, 1.0, self.config.ema_beta)
        self.state = EnvState(PruningMask.empty(self.C))
        self.measurement = self.result = None
        self._t0 = time.perf_counter()
        return self.observe()

    def _protect(self, pruned_now: np.ndarray) -> int:
        """Force-keep the strongest unit of any layer this step would empty."""
        bits = self.state.mask.bits
        forced = 0
        changed = True
        while changed:
            changed = False
            for lid, units in self._layer_units.items():
                if units.size and bits[units].all():
                    candidates = [u for u in units if u in pruned_now]
                    best = max(candidates, key=lambda u: (self.unit_norms[u], -u))
                    bits[best] = False
                    forced += 1
                    changed = True
                    log.info("forced keep of unit %d to keep layer %d alive", best, lid)
        return forced

    def step(self, action) -> tuple[GraphObservation, int, bool]:
        s = self.state
        if s is None or s.done:
            raise EpisodeFinishedError("episode finished; call reset()")
        group = self.groups[s.group_cursor]
        action = np.asarray(action, dtype=bool).reshape(-1)
        if action.size != len(group):
            raise ShapeMismatchError(f"action has {action.size} bits, group {s.group_cursor} has {len(group)} units")
        units = np.arange(group.start, group.stop)
        s.mask.bits[units[action]] = True
        s.forced_keeps += self._protect(set(units[action].tolist()))
        s.group_cursor += 1
        s.done = s.group_cursor == self.n_groups
        reward = 0
        if s.done:
            acc = float(self.oracle.evaluate(s.mask).top1)
            ratio = flops(self.net, s.mask) / self.original_flops
            self.measurement = Measurement(
                s.mask.copy(), acc, ratio, s.forced_keeps, (time.perf_counter() - self._t0) * 1e3
            )
            if not self.defer_reward:
                self.result = settle(self.config.mode, self.tracker, self.measurement)
                reward = self.result.reward
        return self.observe(), reward, s.done

    def run(self, actions) -> Measurement:
        """Play a fixed action sequence (one boolean vector per group)."""
        self.reset()
        for a in actions:
            self.step(a)
        return self.measurement

    def split_mask(self, mask: PruningMask) -> list[np.ndarray]:
        return [mask.bits[g.start : g.stop].copy() for g in self.groups]

    def keep(self) -> dict[int, np.ndarray]:
        return keep_vectors(self.net, self.state.mask)
