"""CMA-ES baseline that searches binary pruning masks through a continuous genome.

Genomes are real vectors; a unit is pruned when ``sigmoid(gene) > 0.5``.  The
optimiser is the textbook (mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu
covariance updates and cumulative step-size adaptation, maximising fitness.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CovarianceDegenerateError
from .netmodel import WEIGHTED, NetworkSpec, PruningMask, flops, unit_l1_norms

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-12


def es_fitness(acc: float, S: float, S_target: float, semantics: str = "corrected") -> float:
    """Penalised accuracy; ``corrected`` pays full accuracy inside the budget.

    ``as_paper`` swaps the branches and pays full accuracy only *outside*
    the budget.
    """
    penalty = acc - abs(S - S_target)
    if semantics == "corrected":
        return acc if S <= S_target else penalty
    if semantics == "as_paper":
        return acc if S > S_target else penalty
    raise ValueError(f"unknown reward semantics {semantics!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def threshold(probs) -> np.ndarray:
    return np.asarray(probs) > 0.5


def binarize(genome) -> PruningMask:
    return PruningMask(threshold(sigmoid(genome)))


@dataclass
class EsConfig:
    S_target: float = 0.5
    generations: int = 60
    population: int | None = None
    sigma0: float = 1.0
    init_mean: float = 0.0
    reward_semantics: str = "corrected"


@dataclass
class CmaState:
    mean: np.ndarray
    sigma: float
    population: int
    cov: np.ndarray = None
    p_sigma: np.ndarray = None
    p_c: np.ndarray = None
    generation: int = 0
    repairs: int = 0
    # strategy constants, filled by __post_init__
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n = self.mean.size
        if self.population < 2:
            raise ValueError("population must be at least 2")
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.cov = np.eye(n) if self.cov is None else self.cov
        self.p_sigma = np.zeros(n) if self.p_sigma is None else self.p_sigma
        self.p_c = np.zeros(n) if self.p_c is None else self.p_c
        mu = self.population // 2
        w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu_eff = 1.0 / float((self.weights**2).sum())
        me = self.mu_eff
        self.c_sigma = (me + 2) / (n + me + 5)
        self.d_sigma = 1 + 2 * max(0.0, math.sqrt((me - 1) / (n + 1)) - 1) + self.c_sigma
        self.c_c = (4 + me / n) / (n + 4 + 2 * me / n)
        self.c_1 = 2 / ((n + 1.3) ** 2 + me)
        self.c_mu = min(1 - self.c_1, 2 * (me - 2 + 1 / me) / ((n + 2) ** 2 + me))
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self._decompose()

    @property
    def n(self) -> int:
        return self.mean.size

    @property
    def mu(self) -> int:
        return self.weights.size

    def _decompose(self) -> None:
        self.cov = 0.5 * (self.cov + self.cov.T)
        eigvals, eigvecs = np.linalg.eigh(self.cov)
        if not np.all(np.isfinite(eigvals)):
            raise CovarianceDegenerateError("covariance has non-finite eigenvalues")
        if eigvals.min() < EIG_FLOOR:
            self.repairs += 1
            log.warning("covariance eigenvalue %.3g floored at %g (generation %d)", eigvals.min(), EIG_FLOOR, self.generation)
            eigvals = np.maximum(eigvals, EIG_FLOOR)
            self.cov = (eigvecs * eigvals) @ eigvecs.T
        self.eig_b = eigvecs
        self.eig_d = np.sqrt(eigvals)


def default_population(n: int) -> int:
    return 4 + int(math.floor(3 * math.log(n)))


def init_state(n: int, config: EsConfig | None = None, mean=None) -> CmaState:
    config = config or EsConfig()
    m = np.full(n, config.init_mean, dtype=np.float64) if mean is None else np.asarray(mean, dtype=np.float64)
    return CmaState(m, config.sigma0, config.population or default_population(n))


def ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((state.population, state.n))
    y = (z * state.eig_d) @ state.eig_b.T
    return state.mean + state.sigma * y


def tell(state: CmaState, genomes: np.ndarray, fitnesses: Sequence[float]) -> CmaState:
    """Update towards the fittest genomes (fitness is maximised)."""
    genomes = np.asarray(genomes, dtype=np.float64)
    order = np.argsort(-np.asarray(fitnesses, dtype=np.float64), kind="stable")[: state.mu]
    y = (genomes[order] - state.mean) / state.sigma
    y_w = state.weights @ y
    state.mean = state.mean + state.sigma * y_w

    inv_sqrt = (state.eig_b / state.eig_d) @ state.eig_b.T
    cs, cc = state.c_sigma, state.c_c
    state.p_sigma = (1 - cs) * state.p_sigma + math.sqrt(cs * (2 - cs) * state.mu_eff) * (inv_sqrt @ y_w)
    norm_ps = float(np.linalg.norm(state.p_sigma))
    g = state.generation + 1
    h_sigma = norm_ps / math.sqrt(1 - (1 - cs) ** (2 * g)) < (1.4 + 2 / (state.n + 1)) * state.chi_n
    state.p_c = (1 - cc) * state.p_c + h_sigma * math.sqrt(cc * (2 - cc) * state.mu_eff) * y_w

    rank_one = np.outer(state.p_c, state.p_c) + (1 - h_sigma) * cc * (2 - cc) * state.cov
    rank_mu = (y.T * state.weights) @ y
    state.cov = (1 - state.c_1 - state.c_mu) * state.cov + state.c_1 * rank_one + state.c_mu * rank_mu
    state.sigma *= math.exp((cs / state.d_sigma) * (norm_ps / state.chi_n - 1))
    state.generation = g
    state._decompose()
    return state


def repair_empty_layers(net: NetworkSpec, mask: PruningMask) -> PruningMask:
    """Keep the strongest unit of every weighted layer the mask would empty."""
    bits = mask.bits.copy()
    norms = unit_l1_norms(net)
    for layer in net.layers:
        if layer.kind not in WEIGHTED:
            continue
        units = net.indexing.units_of_layer(layer.id)
        if units.size and bits[units].all():
            bits[units[np.argmax(norms[units])]] = False
    return PruningMask(bits)


@dataclass
class EsResult:
    best_mask: PruningMask
    best_fitness: float
    best_acc: float
    best_S: float
    history: list[dict]
    best_feasible: tuple[PruningMask, float, float] | None  # (mask, acc, S)
    state: CmaState


def run_es(
    net: NetworkSpec,
    oracle,
    config: EsConfig,
    rng: np.random.Generator,
    on_generation: Callable[[dict], None] | None = None,
) -> EsResult:
    total = flops(net)
    state = init_state(net.indexing.C, config)
    best = None  # (fitness, mask, acc, S)
    best_feasible = None
    history = []
    for _ in range(config.generations):
        genomes = ask(state, rng)
        fits, ratios = [], []
        for genome in genomes:
            mask = repair_empty_layers(net, binarize(genome))
            acc = float(oracle.evaluate(mask).top1)
            S = flops(net, mask) / total
            fit = es_fitness(acc, S, config.S_target, config.reward_semantics)
            fits.append(fit)
            ratios.append(S)
            if best is None or fit > best[0]:
                best = (fit, mask, acc, S)
            if S <= config.S_target and (best_feasible is None or acc > best_feasible[1]):
                best_feasible = (mask, acc, S)
        tell(state, genomes, fits)
        row = {
            "generation": state.generation,
            "best_fitness": best[0],
            "best_acc": best[2],
            "best_S": best[3],
            "mean_S": float(np.mean(ratios)),
            "sigma": state.sigma,
        }
        history.append(row)
        if on_generation:
            on_generation(row)
    return EsResult(best[1], best[0], best[2], best[3], history, best_feasible, state)


def write_generations(path, history: Sequence[dict]) -> None:
    cols = ["generation", "best_fitness", "best_acc", "best_S", "mean_S", "sigma"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in history:
            w.writerow([r["generation"]] + [f"{r[c]:.6g}" for c in cols[1:]])
