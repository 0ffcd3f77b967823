"""Actor-critic PPO over graph embeddings with per-unit Bernoulli actions."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import diffcore
from .env import (
    Calibration,
    EmaTracker,
    EnvConfig,
    EpisodeResult,
    Measurement,
    PruningEnv,
    ResourceConstrained,
    calibrate,
    settle,
)
from .errors import IncompleteEpisodeError, NonFiniteLossError, StaleRolloutError
from .gat import DenseGraph, GatEncoder, orthogonal_linear, stack_observations
from .netmodel import EDGE_DIM, GraphObservation, NetworkSpec, PruningMask

log = logging.getLogger(__name__)

TAG_INIT = 1
TAG_ROLLOUT = 2
TAG_SHUFFLE = 3
TAG_EXPORT = 4


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Independent generator for (master seed, purpose tag, worker/episode index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, index)))


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    lr: float = 3e-4
    update_epochs: int = 4
    minibatch_size: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    episodes_per_update: int = 16
    gamma: float = 1.0
    init_prune_prob: float = 0.05
    max_grad_norm: float = 0.5
    hidden: int = 128
    d_emb: int = 128
    rounds: int = 3

    def check(self, n_groups: int) -> None:
        if self.gamma not in (0.0, 1.0):
            raise ValueError("gamma must be 0.0 or 1.0")
        if (self.gamma == 0.0) != (n_groups == 1):
            raise ValueError("gamma must be 0.0 exactly when n_groups == 1")


class Head(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, out_gain: float, out_bias: float = 0.0):
        super().__init__()
        self.hidden = orthogonal_linear(d_in, d_hidden, rng, gain=math.sqrt(2.0))
        self.out = orthogonal_linear(d_hidden, d_out, rng, gain=out_gain)
        with torch.no_grad():
            self.out.bias.fill_(out_bias)

    def forward(self, x):
        return self.out(torch.tanh(self.hidden(x)))


class PolicyNet(nn.Module):
    def __init__(self, encoder: GatEncoder, group_size: int, n_groups: int, p0: float, rng: np.random.Generator, hidden: int = 128):
        super().__init__()
        self.encoder = encoder
        self.group_size = group_size
        self.n_groups = n_groups
        self.actor = Head(encoder.d_emb, hidden, group_size, rng, out_gain=0.01, out_bias=math.log(p0 / (1.0 - p0)))
        self.critic = Head(encoder.d_emb, hidden, 1, rng, out_gain=1.0)
        self.generation = 0

    def forward(self, graph: DenseGraph) -> tuple[torch.Tensor, torch.Tensor]:
        _, emb = self.encoder(graph)
        return self.actor(emb), self.critic(emb).squeeze(-1)


def init_policy(
    d_node: int,
    group_size: int,
    n_groups: int,
    config: PpoConfig,
    seed: int,
    encoder: GatEncoder | None = None,
) -> PolicyNet:
    rng = stream(seed, TAG_INIT)
    if encoder is None:
        encoder = GatEncoder(d_node, EDGE_DIM, rng, hidden=config.hidden, d_emb=config.d_emb, rounds=config.rounds)
    return PolicyNet(encoder, group_size, n_groups, config.init_prune_prob, rng, hidden=config.hidden)


def valid_mask(sizes: Sequence[int], width: int) -> torch.Tensor:
    return (torch.arange(width)[None, :] < torch.tensor(list(sizes))[:, None]).to(torch.get_default_dtype())


@torch.no_grad()
def act(policy: PolicyNet, obs: GraphObservation, group_len: int, rng: np.random.Generator, greedy: bool = False):
    """Sample prune bits for the current group; returns (bits, log_prob, value)."""
    logits, value = policy(stack_observations([obs]))
    logits = logits[0, :group_len].clamp(-diffcore.LOGIT_CLAMP, diffcore.LOGIT_CLAMP)
    probs = torch.sigmoid(logits).double().numpy()
    if greedy:
        bits = probs > 0.5
    else:
        bits = rng.random(group_len) < probs
    logp = diffcore.bernoulli_logprob(logits, torch.tensor(bits, dtype=logits.dtype))
    return bits, float(logp), float(value[0])


@dataclass
class Step:
    obs: GraphObservation
    bits: np.ndarray  # length = group size
    log_prob: float
    value: float
    reward: float = 0.0
    done: bool = False
    episode: int = 0
    generation: int = 0


@dataclass
class RolloutBuffer:
    generation: int
    steps: list[Step] = field(default_factory=list)

    def add_episode(self, steps: Sequence[Step]) -> None:
        for s in steps:
            if s.generation != self.generation:
                raise StaleRolloutError(f"rollout from generation {s.generation}, buffer expects {self.generation}")
        if not steps or not steps[-1].done:
            raise IncompleteEpisodeError("episodes must be added whole")
        self.steps.extend(steps)

    def __len__(self) -> int:
        return len(self.steps)


def compute_returns(buffer: RolloutBuffer, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo returns of terminal-only rewards and normalised advantages."""
    steps = buffer.steps
    if steps and not steps[-1].done:
        raise IncompleteEpisodeError("buffer ends mid-episode")
    returns = np.zeros(len(steps))
    end = len(steps) - 1
    for t in range(len(steps) - 1, -1, -1):
        if steps[t].done:
            end = t
        returns[t] = (gamma ** (end - t)) * steps[end].reward
    values = np.array([s.value for s in steps])
    adv = returns - values
    adv = (adv - adv.mean()) / (adv.std() + 1e-8) if len(adv) else adv
    return returns, adv


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float


def ppo_loss(policy: PolicyNet, steps: Sequence[Step], returns, advantages, config: PpoConfig):
    """Clipped surrogate + value + entropy terms for one minibatch."""
    graph = stack_observations([s.obs for s in steps], dtype=policy.actor.out.weight.dtype)
    logits, values = policy(graph)
    width = policy.group_size
    dtype = logits.dtype
    valid = valid_mask([len(s.bits) for s in steps], width).to(dtype)
    actions = torch.zeros(len(steps), width, dtype=dtype)
    for i, s in enumerate(steps):
        actions[i, : len(s.bits)] = torch.tensor(s.bits, dtype=dtype)
    new_logp = diffcore.bernoulli_logprob(logits, actions, valid)
    old_logp = torch.tensor([s.log_prob for s in steps], dtype=dtype)
    adv = torch.as_tensor(advantages, dtype=dtype)
    ret = torch.as_tensor(returns, dtype=dtype)
    ratio = torch.exp(new_logp - old_logp)
    clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps)
    policy_loss = -torch.min(ratio * adv, clipped * adv).mean()
    value_loss = diffcore.mse(values, ret)
    entropy = diffcore.bernoulli_entropy(logits, valid).mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    clip_fraction = float(((ratio.detach() - 1.0).abs() > config.clip_eps).double().mean())
    return total, LossReport(float(policy_loss.detach()), float(value_loss.detach()), float(entropy.detach()), clip_fraction)


def update(policy: PolicyNet, buffer: RolloutBuffer, config: PpoConfig, opt: diffcore.Adam, rng: np.random.Generator) -> LossReport:
    if buffer.generation != policy.generation:
        raise StaleRolloutError("buffer was collected with an older policy")
    returns, adv = compute_returns(buffer, config.gamma)
    params = list(policy.parameters())
    n = len(buffer)
    reports = []
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for mb, start in enumerate(range(0, n, config.minibatch_size)):
            idx = order[start : start + config.minibatch_size]
            total, report = ppo_loss(policy, [buffer.steps[i] for i in idx], returns[idx], adv[idx], config)
            if not torch.isfinite(total):
                raise NonFiniteLossError(f"non-finite PPO loss in minibatch {mb}", minibatch=mb)
            grads = diffcore.backward(total, params)
            if config.max_grad_norm > 0:
                diffcore.clip_grad_norm(grads, config.max_grad_norm)
            opt.step(grads)
            reports.append(report)
    for p in params:
        if not torch.isfinite(p).all():
            raise NonFiniteLossError("policy parameters became non-finite")
    policy.generation += 1
    return LossReport(*(float(np.mean([getattr(r, f) for r in reports])) for f in LossReport.__dataclass_fields__))


def run_episode(policy: PolicyNet, env: PruningEnv, rng: np.random.Generator, greedy: bool = False, episode: int = 0) -> list[Step]:
    obs = env.reset()
    steps = []
    done = False
    while not done:
        group = env.groups[env.state.group_cursor]
        bits, logp, value = act(policy, obs, len(group), rng, greedy=greedy)
        next_obs, reward, done = env.step(bits)
        steps.append(Step(obs, bits, logp, value, float(reward), done, episode, policy.generation))
        obs = next_obs
    return steps


@dataclass
class TrainResult:
    policy: PolicyNet
    results: list[EpisodeResult]
    updates: list[dict]
    calibration: Calibration
    first_feasible: int | None


def train_agent(
    net: NetworkSpec,
    oracle,
    env_config: EnvConfig,
    config: PpoConfig,
    episodes: int,
    seed: int = 0,
    encoder: GatEncoder | None = None,
    workers: int = 1,
    on_episode: Callable[[int, EpisodeResult], None] | None = None,
    on_update: Callable[[dict], None] | None = None,
    until_feasible: bool = False,
) -> TrainResult:
    """Collect ``episodes_per_update`` episodes per generation and run PPO on them.

    Each episode samples from its own seeded stream and rewards are settled in
    episode-index order, so results do not depend on ``workers``.  With
    ``until_feasible`` training stops after the first batch that contains a
    feasible episode.
    """
    config.check(env_config.n_groups)
    calibration = calibrate(oracle)
    tracker = EmaTracker(calibration.baseline_acc, 1.0, env_config.ema_beta)
    probe = PruningEnv(net, env_config, oracle, tracker, calibration)
    first_obs = probe.reset()
    if encoder is None:
        policy = init_policy(first_obs.node_features.shape[1], probe.max_group, probe.n_groups, config, seed)
        policy.encoder.fit_scaler([first_obs])
    else:
        policy = init_policy(first_obs.node_features.shape[1], probe.max_group, probe.n_groups, config, seed, encoder)
    opt = diffcore.Adam(list(policy.parameters()), lr=config.lr)
    shuffle_rng = stream(seed, TAG_SHUFFLE)

    def one(ep: int):
        env = PruningEnv(net, env_config, oracle, tracker, calibration, defer_reward=True)
        steps = run_episode(policy, env, stream(seed, TAG_ROLLOUT, ep), episode=ep)
        return steps, env.measurement

    results: list[EpisodeResult] = []
    updates: list[dict] = []
    first_feasible = None
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        ep = 0
        while ep < episodes:
            batch = range(ep, min(ep + config.episodes_per_update, episodes))
            outcomes = list(pool.map(one, batch)) if pool else [one(i) for i in batch]
            buffer = RolloutBuffer(policy.generation)
            for i, (steps, m) in zip(batch, outcomes):
                res = settle(env_config.mode, tracker, m)
                steps[-1].reward = float(res.reward)
                buffer.add_episode(steps)
                results.append(res)
                if first_feasible is None and env_config.mode.feasible(res.acc_ep, res.flops_ratio):
                    first_feasible = i
                if on_episode:
                    on_episode(i, res)
            ep = batch.stop
            report = update(policy, buffer, config, opt, shuffle_rng)
            chunk = results[batch.start : batch.stop]
            record = {
                "update": len(updates),
                "mean_reward": float(np.mean([r.reward for r in chunk])),
                "clip_fraction": report.clip_fraction,
                "entropy": report.entropy,
                "value_loss": report.value_loss,
                "mean_acc": float(np.mean([r.acc_ep for r in chunk])),
                "mean_flops_ratio": float(np.mean([r.flops_ratio for r in chunk])),
            }
            updates.append(record)
            log.info("update %(update)d reward %(mean_reward).3f flops %(mean_flops_ratio).3f acc %(mean_acc).3f", record)
            if on_update:
                on_update(record)
            if until_feasible and first_feasible is not None:
                break
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(policy, results, updates, calibration, first_feasible)


def _score(mode, m: Measurement) -> tuple:
    # feasible first, then the mode's objective, then least violation
    if isinstance(mode, ResourceConstrained):
        return (mode.feasible(m.acc_ep, m.flops_ratio), m.acc_ep if mode.feasible(m.acc_ep, m.flops_ratio) else -m.flops_ratio)
    return (mode.feasible(m.acc_ep, m.flops_ratio), -m.flops_ratio if mode.feasible(m.acc_ep, m.flops_ratio) else m.acc_ep)


def export_mask(
    policy: PolicyNet,
    net: NetworkSpec,
    oracle,
    env_config: EnvConfig,
    samples: int = 16,
    seed: int = 0,
    calibration: Calibration | None = None,
) -> tuple[PruningMask, Measurement]:
    """Best of the greedy mask and ``samples`` sampled masks under the mode's objective."""
    calibration = calibration or calibrate(oracle)
    candidates = []
    for k in range(samples + 1):
        env = PruningEnv(net, env_config, oracle, EmaTracker(calibration.baseline_acc), calibration, defer_reward=True)
        run_episode(policy, env, stream(seed, TAG_EXPORT, k), greedy=(k == 0))
        candidates.append(env.measurement)
    best = max(candidates, key=lambda m: _score(env_config.mode, m))
    return best.mask, best


def policy_tensors(policy: PolicyNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in policy.state_dict().items()}


def load_policy_tensors(policy: PolicyNet, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.tensor(v) for k, v in tensors.items()}
    policy.load_state_dict(state)
