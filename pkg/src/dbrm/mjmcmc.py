"""Mode jumping MCMC over the models spanned by a fixed feature population.

Models are bit masks over the population (bit ``i`` set means feature ``i``
is included).  The population is kept sorted by canonical key so the set
bits, read in increasing order, give the sorted model key directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import glm
from .features import Feature
from .scoring import ModelKey, ModelScorer

NEG_INF = -math.inf


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def bits(mask: int) -> list[int]:
    return [i for i, c in enumerate(reversed(bin(mask))) if c == "1"]


def hamming(a: int, b: int) -> int:
    return popcount(a ^ b)


@dataclass
class MjmcmcConfig:
    prob_large_jump: float = 0.05
    large_jump_size_range: tuple[int, int] = (2, 4)
    local_opt_steps: int = 10
    randomize_prob: float = 0.05
    rng_seed: int | None = None

    def __post_init__(self):
        lo, hi = self.large_jump_size_range
        if not 1 <= lo <= hi:
            raise ValueError("large_jump_size_range must satisfy 1 <= low <= high")
        if not 0.0 < self.randomize_prob < 0.5:
            raise ValueError("randomize_prob must lie in (0, 0.5)")
        if not 0.0 <= self.prob_large_jump <= 1.0:
            raise ValueError("prob_large_jump must lie in [0, 1]")

    def jump_range(self, s: int) -> tuple[int, int]:
        lo, hi = self.large_jump_size_range
        hi = min(hi, s)
        return min(lo, hi), hi


class PopulationScorer:
    """Log posterior mass of models given as masks over one population."""

    def __init__(self, scorer: ModelScorer, features: Sequence[Feature]):
        self.scorer = scorer
        self.features: list[Feature] = sorted({f.key: f for f in features}.values(), key=lambda f: f.key)
        self.keys = [f.key for f in self.features]
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.cache: dict[int, float] = {}
        self._gram = None

    @property
    def s(self) -> int:
        return len(self.features)

    @property
    def Q(self) -> int:
        return self.scorer.Q

    def model_key(self, mask: int) -> ModelKey:
        return tuple(self.keys[i] for i in bits(mask))

    def mask_of(self, keys) -> int:
        mask = 0
        for k in keys:
            mask |= 1 << self.index[k]
        return mask

    def log_mass(self, mask: int) -> float:
        hit = self.cache.get(mask)
        if hit is not None:
            return hit
        idx = bits(mask)
        if len(idx) > self.Q:
            val = NEG_INF
        else:
            fast = self._fast_marginal(idx) if self.scorer.family.is_gaussian else None
            sc = self.scorer.score([self.features[i] for i in idx], fast)
            val = NEG_INF if sc is None else sc.log_mass
        self.cache[mask] = val
        return val

    __call__ = log_mass

    def _fast_marginal(self, idx: list[int]):
        """Deferred Gaussian marginal from the population's Gram matrix."""

        def compute():
            if self._gram is None:
                Z = np.column_stack([self.scorer.standardized(f) for f in self.features]) \
                    if self.features else np.empty((self.scorer.n, 0))
                yc = self.scorer.centred_y
                self._gram = (Z.T @ Z, Z.T @ yc, float(yc @ yc))
            G, zy, yy = self._gram
            return glm.gaussian_log_marginal_gram(G[np.ix_(idx, idx)], zy[idx], yy, self.scorer.n)

        return compute


@dataclass
class ChainState:
    current: int
    log_mass: float
    visit_counts: dict[ModelKey, int] = field(default_factory=dict)
    proposals: int = 0
    accepted: int = 0

    def record(self, key: ModelKey) -> None:
        self.visit_counts[key] = self.visit_counts.get(key, 0) + 1


def truncate(mask: int, Q: int, rng: np.random.Generator) -> int:
    """Switch off uniformly chosen bits until at most ``Q`` remain."""
    on = bits(mask)
    excess = len(on) - Q
    if excess <= 0:
        return mask
    for i in rng.choice(on, size=excess, replace=False):
        mask &= ~(1 << int(i))
    return mask


def large_jump(mask: int, s: int, size_range: tuple[int, int], Q: int, rng: np.random.Generator) -> int:
    """Flip ``k`` distinct bits, ``k`` uniform on ``size_range``; then enforce size <= Q."""
    lo, hi = size_range
    k = int(rng.integers(lo, hi + 1))
    for i in rng.choice(s, size=k, replace=False):
        mask ^= 1 << int(i)
    return truncate(mask, Q, rng)


def local_optimize(start: int, steps: int, score, s: int, Q: int) -> int:
    """Greedy ascent over single-bit flips that keep the model size <= Q."""
    current = start
    best = score(current)
    for _ in range(steps):
        size = popcount(current)
        move, move_val = None, best
        for i in range(s):
            cand = current ^ (1 << i)
            if size >= Q and not (current >> i) & 1:
                continue
            val = score(cand)
            if val > move_val:
                move, move_val = cand, val
        if move is None:
            break
        current, best = move, move_val
    return current


def randomize(mask: int, rho: float, s: int, rng: np.random.Generator) -> int:
    flips = np.flatnonzero(rng.random(s) < rho)
    for i in flips:
        mask ^= 1 << int(i)
    return mask


def log_q_randomize(frm: int, to: int, rho: float, s: int) -> float:
    """log of rho^d (1 - rho)^(s - d) with d the Hamming distance."""
    d = hamming(frm, to)
    return d * math.log(rho) + (s - d) * math.log1p(-rho)


def accept(log_ratio: float, rng: np.random.Generator) -> bool:
    if log_ratio >= 0:
        return True
    if log_ratio == NEG_INF or math.isnan(log_ratio):
        return False
    return math.log(rng.random()) < log_ratio


def mode_jump_proposal(state: ChainState, config: MjmcmcConfig, score, s: int, Q: int,
                       rng: np.random.Generator) -> tuple[int, float]:
    """Propose through large jump, local search and randomization.

    Returns the proposal and the log acceptance ratio (``-inf`` when the
    proposal has zero target mass).
    """
    rng_range = config.jump_range(s)
    rho = config.randomize_prob
    start = large_jump(state.current, s, rng_range, Q, rng)
    mode = local_optimize(start, config.local_opt_steps, score, s, Q)
    prop = randomize(mode, rho, s, rng)
    prop_val = score(prop)
    if prop_val == NEG_INF:
        return prop, NEG_INF
    back_start = large_jump(prop, s, rng_range, Q, rng)
    back_mode = local_optimize(back_start, config.local_opt_steps, score, s, Q)
    log_r = (prop_val - state.log_mass
             + log_q_randomize(back_mode, state.current, rho, s)
             - log_q_randomize(mode, prop, rho, s))
    return prop, log_r


def mjmcmc_step(state: ChainState, config: MjmcmcConfig, score: PopulationScorer,
                rng: np.random.Generator) -> ChainState:
    """One Metropolis-Hastings step: a mode jump with probability
    ``prob_large_jump``, otherwise a single random bit flip."""
    s, Q = score.s, score.Q
    state.proposals += 1
    if s == 0:
        state.record(score.model_key(state.current))
        return state
    if rng.random() < config.prob_large_jump:
        prop, log_r = mode_jump_proposal(state, config, score, s, Q, rng)
    else:
        prop = state.current ^ (1 << int(rng.integers(s)))
        val = score(prop)
        log_r = val - state.log_mass if val != NEG_INF else NEG_INF
    if prop == state.current:
        # nothing changes whichever way the coin falls
        log_r = 0.0
    if accept(log_r, rng):
        state.current = prop
        state.log_mass = score(prop)
        state.accepted += 1
    state.record(score.model_key(state.current))
    return state


def run_mjmcmc(score: PopulationScorer, n_iter: int, config: MjmcmcConfig, rng: np.random.Generator,
               start: int = 0, state: ChainState | None = None) -> ChainState:
    if state is None:
        val = score(start)
        if val == NEG_INF:
            start, val = 0, score(0)
        state = ChainState(start, val)
    for _ in range(n_iter):
        mjmcmc_step(state, config, score, rng)
    return state
