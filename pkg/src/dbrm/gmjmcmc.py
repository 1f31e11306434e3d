"""Feature populations and the genetically modified MJMCMC samplers.

``run_gmjmcmc`` runs MJMCMC segments on a sequence of evolving feature
populations and reports posteriors by renormalization over every scored
model.  ``run_rgmjmcmc`` is the reversible variant: each step regenerates a
population around the current model, searches it, and accepts through a
two stage (delayed acceptance) test, so visit frequencies are consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import glm
from .features import (
    Feature,
    FeatureEvaluationError,
    FeatureRejected,
    Leaf,
    SpanChecker,
    make_crossover,
    make_modification,
    make_projection,
)
from .mjmcmc import (
    NEG_INF,
    ChainState,
    MjmcmcConfig,
    PopulationScorer,
    accept,
    bits,
    large_jump,
    local_optimize,
    log_q_randomize,
    mjmcmc_step,
    randomize,
)
from .scoring import ModelKey, ModelRegistry, ModelScorer
from .transforms import PRESETS, TransformationSet


class ConfigurationError(ValueError):
    pass


@dataclass
class GmjmcmcConfig:
    Q: int = 20
    D_max: int = 5
    a: float = math.exp(-2.0)
    s: int | None = None
    T_max: int = 20
    N_init: int = 200
    N_expl: int = 250
    N_final: int = 1000
    final_unique_models: int | None = None
    P_m: float = 0.1
    P_c: float = 0.3
    P_t: float = 0.3
    P_p: float = 0.3
    P_del: float = 0.5
    filtration_threshold: float = 0.1
    keep_always: tuple[int, ...] = ()
    adaptive: bool = True
    epsilon: float = 0.01
    transforms: tuple[str, ...] = PRESETS["g1"]
    rho_r: float = 0.02
    max_redraws: int = 20
    max_projection_children: int = 5
    grow_f0: bool = False
    laplace_2pi: bool = True
    mjmcmc: MjmcmcConfig = field(default_factory=MjmcmcConfig)

    def __post_init__(self):
        probs = (self.P_m, self.P_c, self.P_t, self.P_p)
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError("operator probabilities P_m, P_c, P_t, P_p must be >= 0 and sum to 1")
        if not 0.0 < self.a < 1.0:
            raise ConfigurationError("a must lie in (0, 1)")
        if self.Q < 1:
            raise ConfigurationError("Q must be >= 1")
        if self.D_max < 0:
            raise ConfigurationError("D_max must be >= 0")
        if self.T_max < 1:
            raise ConfigurationError("T_max must be >= 1")
        if not 0.0 <= self.P_del <= 1.0:
            raise ConfigurationError("P_del must lie in [0, 1]")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigurationError("epsilon must lie in (0, 0.5)")
        if not 0.0 < self.rho_r < 0.5:
            raise ConfigurationError("rho_r must lie in (0, 0.5)")
        if self.s is not None and self.s < 1:
            raise ConfigurationError("s must be >= 1")

    def population_size(self, m: int) -> int:
        if self.s is not None:
            return self.s
        return max(self.Q + 2, min(2 * m, 50))


@dataclass
class Population:
    features: list[Feature]
    generation: int = 0

    def __post_init__(self):
        self.features = sorted({f.key: f for f in self.features}.values(), key=lambda f: f.key)

    @property
    def keys(self) -> list[str]:
        return [f.key for f in self.features]

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)


# ---------------------------------------------------------------------------
# adaptive operand weights


class AdaptiveWeights:
    """Running-mean inclusion estimates truncated to ``[eps, 1 - eps]``.

    Each feature keeps its own update count, so consecutive estimates of a
    feature differ by at most ``1 / count``.
    """

    def __init__(self, epsilon: float = 0.01, enabled: bool = True):
        self.epsilon = epsilon
        self.enabled = enabled
        self.mean: dict[str, float] = {}
        self.count: dict[str, int] = {}

    def update(self, inclusion: dict[str, float]) -> None:
        for k, x in inclusion.items():
            n = self.count.get(k, 0) + 1
            m = self.mean.get(k, 0.0)
            self.mean[k] = m + (x - m) / n
            self.count[k] = n

    def weight(self, key: str) -> float:
        if not self.enabled:
            return 1.0
        m = self.mean.get(key)
        if m is None:
            return self.epsilon
        return min(max(m, self.epsilon), 1.0 - self.epsilon)

    def weights(self, keys: Sequence[str]) -> np.ndarray:
        return np.array([self.weight(k) for k in keys], dtype=float)


def update_adaptive(weights: AdaptiveWeights, inclusion: dict[str, float]) -> AdaptiveWeights:
    weights.update(inclusion)
    return weights


# ---------------------------------------------------------------------------
# feature generation


class FeatureGenerator:
    """Draws new features with the mutation, modification, crossover and
    projection operators, rejecting duplicates and linearly dependent ones."""

    def __init__(self, scorer: ModelScorer, config: GmjmcmcConfig, adaptive: AdaptiveWeights):
        self.scorer = scorer
        self.config = config
        self.adaptive = adaptive
        self.transforms = TransformationSet.from_names(config.transforms) if config.transforms else None
        self.g_names = list(config.transforms)
        X = scorer.X
        ok = [j for j in range(X.shape[1]) if np.all(np.isfinite(X[:, j])) and np.ptp(X[:, j]) > 0]
        self.f0: list[Feature] = [Leaf(j) for j in ok]
        self.pool: dict[str, Feature] = {f.key: f for f in self.f0}
        self.rejections = 0
        self._ops = self._operators(config.D_max)
        self._checkers: dict[tuple[str, ...], SpanChecker] = {}
        self._scorers: dict[tuple[str, ...], PopulationScorer] = {}

    CACHE_SIZE = 512

    def checker_for(self, members: Sequence[Feature]) -> SpanChecker:
        """A fresh span checker over ``members`` (built once per member set)."""
        key = tuple(f.key for f in members)
        hit = self._checkers.get(key)
        if hit is None:
            if len(self._checkers) >= self.CACHE_SIZE:
                self._checkers.pop(next(iter(self._checkers)))
            hit = self._checkers[key] = SpanChecker([self.scorer.column(f) for f in members], self.scorer.n)
        return hit.copy()

    def scorer_for(self, population: "Population") -> PopulationScorer:
        """Population scorer with its mask cache kept across repeated populations."""
        key = tuple(population.keys)
        hit = self._scorers.get(key)
        if hit is None:
            if len(self._scorers) >= self.CACHE_SIZE:
                self._scorers.pop(next(iter(self._scorers)))
            hit = self._scorers[key] = PopulationScorer(self.scorer, population.features)
        return hit

    def _operators(self, D_max: int) -> tuple[np.ndarray, list[str]]:
        c = self.config
        names = ["mutation", "crossover", "modification", "projection"]
        p = np.array([c.P_m, c.P_c, c.P_t, c.P_p], dtype=float)
        if D_max == 0 or (not self.g_names):
            p[[2, 3]] = 0.0
        if D_max == 0:
            p[1] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        return p / p.sum(), names

    def _operand_pool(self, members: Sequence[Feature]) -> tuple[list[Feature], np.ndarray]:
        pool = {f.key: f for f in members}
        for f in self.f0:
            pool.setdefault(f.key, f)
        feats = list(pool.values())
        return feats, self.adaptive.weights([f.key for f in feats])

    def _pick(self, feats, weights, rng, size=1, replace=False):
        p = weights / weights.sum()
        idx = rng.choice(len(feats), size=size, replace=replace, p=p)
        return [feats[int(i)] for i in np.atleast_1d(idx)]

    def _mutation(self, present: set[str], rng) -> Feature | None:
        source = list(self.pool.values()) if self.config.grow_f0 else self.f0
        fresh = [f for f in source if f.key not in present]
        if not fresh:
            return None
        return fresh[int(rng.integers(len(fresh)))]

    def propose(self, op: str, members: Sequence[Feature], present: set[str], rng) -> Feature | None:
        """One candidate from operator ``op``; raises FeatureRejected when invalid."""
        D = self.config.D_max
        if op == "mutation":
            return self._mutation(present, rng)
        feats, w = self._operand_pool(members)
        if op == "modification":
            (f,) = self._pick(feats, w, rng)
            g = self.g_names[int(rng.integers(len(self.g_names)))]
            return make_modification(f, g, D)
        if op == "crossover":
            f1, f2 = self._pick(feats, w, rng, size=2, replace=True)
            return make_crossover(f1, f2, D)
        if op == "projection":
            base = list(members)
            if not base:
                raise FeatureRejected("projection needs population members")
            hi = min(self.config.max_projection_children, len(base))
            k = int(rng.integers(min(2, hi), hi + 1))
            children = self._pick(base, self.adaptive.weights([f.key for f in base]), rng, size=k)
            cols = np.column_stack([self.scorer.column(c) for c in children])
            try:
                a0, alpha = glm.fit_projection_weights(cols, self.scorer.y, self.scorer.family)
            except (glm.ScoreUnavailable, np.linalg.LinAlgError):
                raise FeatureRejected("projection weight fit failed") from None
            g = self.g_names[int(rng.integers(len(self.g_names)))]
            return make_projection(children, g, a0, alpha, D)
        raise ValueError(op)

    def draw(self, members: Sequence[Feature], checker: SpanChecker, present: set[str],
             rng: np.random.Generator) -> Feature | None:
        """A new valid feature not in ``present`` and independent of ``checker``'s span."""
        p, names = self._ops
        if p[0] == 1.0 and all(f.key in present for f in self.f0) and not self.config.grow_f0:
            return None
        for _ in range(self.config.max_redraws):
            op = names[int(rng.choice(4, p=p))]
            try:
                f = self.propose(op, members, present, rng)
                if f is None or f.key in present:
                    raise FeatureRejected("duplicate")
                col = self.scorer.column(f)
            except (FeatureRejected, FeatureEvaluationError):
                self.rejections += 1
                continue
            if checker.add(col):
                self.pool.setdefault(f.key, f)
                return f
            self.rejections += 1
        # fallback: mutation over the unused covariates in random order
        order = rng.permutation(len(self.f0))
        for i in order:
            f = self.f0[int(i)]
            if f.key in present:
                continue
            if checker.add(self.scorer.column(f)):
                return f
        return None


def transition(population: Population, n_new: int, generator: FeatureGenerator,
               rng: np.random.Generator, operands: Sequence[Feature] | None = None) -> Population:
    """Add up to ``n_new`` generated features to ``population``.

    Operands come from ``operands`` (default: the population itself) and
    the raw covariates.
    """
    members = list(population.features)
    if n_new <= 0:
        return Population(members, population.generation + 1)
    operands = list(operands) if operands is not None else members
    present = {f.key for f in members}
    checker = generator.checker_for(members)
    for _ in range(n_new):
        f = generator.draw(operands, checker, present, rng)
        if f is None:
            break
        members.append(f)
        present.add(f.key)
    return Population(members, population.generation + 1)


def filtrate(population: Population, inclusion: dict[str, float], config: GmjmcmcConfig,
             rng: np.random.Generator) -> tuple[list[Feature], int]:
    """Delete low-inclusion members with probability ``P_del``.

    Members that are raw covariates listed in ``keep_always`` are never removed.
    """
    keep_keys = {Leaf(i).key for i in config.keep_always}
    survivors = []
    for f in population.features:
        low = inclusion.get(f.key, 0.0) < config.filtration_threshold
        if low and f.key not in keep_keys and rng.random() < config.P_del:
            continue
        survivors.append(f)
    return survivors, len(population) - len(survivors)


# ---------------------------------------------------------------------------
# chain bookkeeping


def segment_inclusion(models: Sequence[ModelKey], registry: ModelRegistry, keys: Sequence[str]) -> dict[str, float]:
    """Renormalized inclusion probabilities over a set of visited models."""
    out = {k: 0.0 for k in keys}
    if not models:
        return out
    lm = np.array([registry.get(m).log_mass for m in models])
    w = np.exp(lm - lm.max())
    w /= w.sum()
    for m, wi in zip(models, w):
        for k in m:
            if k in out:
                out[k] += wi
    return out


@dataclass
class GenerationRecord:
    generation: int
    population: list[str]
    acceptance_rate: float
    best_log_mass: float
    registry_size: int

    def as_dict(self) -> dict:
        return {
            "generation": self.generation,
            "population": self.population,
            "acceptance_rate": self.acceptance_rate,
            "best_log_mass": self.best_log_mass,
            "registry_size": self.registry_size,
        }


@dataclass
class ChainResult:
    registry: ModelRegistry
    trace: list[GenerationRecord]
    visit_counts: dict[ModelKey, int]
    population: Population
    glm_calls: int
    steps: int = 0
    accepted: int = 0

    def __iter__(self):
        # allows ``registry, trace = run_gmjmcmc(...)``
        return iter((self.registry, self.trace))


def _visited_models(state: ChainState, before: dict[ModelKey, int]) -> list[ModelKey]:
    return [k for k, v in state.visit_counts.items() if v != before.get(k, 0)]


def _run_segment(pscorer: PopulationScorer, state: ChainState, n_iter: int, config: MjmcmcConfig,
                 rng: np.random.Generator, evaluated: list[ModelKey] | None = None) -> tuple[float, set[ModelKey]]:
    """Run ``n_iter`` MJMCMC steps; return acceptance rate and the models scored or visited."""
    acc0, prop0 = state.accepted, state.proposals
    seen: set[ModelKey] = set()
    cache_before = set(pscorer.cache)
    for _ in range(n_iter):
        mjmcmc_step(state, config, pscorer, rng)
        seen.add(pscorer.model_key(state.current))
    for mask in pscorer.cache.keys() - cache_before:
        if pscorer.cache[mask] != NEG_INF:
            seen.add(pscorer.model_key(mask))
    props = state.proposals - prop0
    return ((state.accepted - acc0) / props if props else 0.0), seen


def _preselect(scorer: ModelScorer, generator: FeatureGenerator, s: int) -> list[Feature]:
    null = scorer.score([])
    if null is None:
        raise ConfigurationError("the intercept-only model cannot be fitted")
    ranked = []
    for f in generator.f0:
        sc = scorer.score([f])
        if sc is not None:
            ranked.append((sc.log_mass, f))
    if not ranked:
        raise ConfigurationError("no viable covariate: every single-covariate model failed to fit")
    ranked.sort(key=lambda t: (-t[0], t[1].key))
    return [f for _, f in ranked[:s]]


def init_population(scorer: ModelScorer, config: GmjmcmcConfig, generator: FeatureGenerator,
                    rng: np.random.Generator, weights: AdaptiveWeights) -> tuple[Population, dict[str, float]]:
    """Preselect covariates, explore them with MJMCMC and seed the first population."""
    m = scorer.X.shape[1]
    s = config.population_size(m)
    s0 = _preselect(scorer, generator, s)
    pscorer = PopulationScorer(scorer, s0)
    state = ChainState(0, pscorer(0))
    _, seen = _run_segment(pscorer, state, config.N_init, config.mjmcmc, rng)
    incl = segment_inclusion(sorted(seen), scorer.registry, pscorer.keys)
    weights.update(incl)
    keep_keys = {Leaf(i).key for i in config.keep_always}
    ranked = sorted(pscorer.features, key=lambda f: (-incl[f.key], f.key))
    s1 = min(len(ranked), max(1, s - max(1, s // 2)))
    chosen = [f for f in ranked if f.key in keep_keys] + [f for f in ranked if f.key not in keep_keys]
    chosen = chosen[: max(s1, len(keep_keys))]
    pop = transition(Population(chosen, 0), s - len(chosen), generator, rng, operands=s0)
    return Population(pop.features, 1), incl


def _project_state(state: ChainState, pscorer_old: PopulationScorer | None, pscorer: PopulationScorer) -> ChainState:
    keys = pscorer_old.model_key(state.current) if pscorer_old is not None else ()
    mask = pscorer.mask_of(k for k in keys if k in pscorer.index)
    val = pscorer(mask)
    if val == NEG_INF:
        mask, val = 0, pscorer(0)
    state.current, state.log_mass = mask, val
    return state


def run_gmjmcmc(X: np.ndarray, y: np.ndarray, family: glm.Family | str, config: GmjmcmcConfig,
                seed: int | np.random.Generator | None = None, scorer: ModelScorer | None = None) -> ChainResult:
    """Genetically modified MJMCMC: MJMCMC segments over evolving populations."""
    rng = np.random.default_rng(seed)
    transforms = TransformationSet.from_names(config.transforms) if config.transforms else None
    if scorer is None:
        scorer = ModelScorer(X, y, family, config.a, config.Q, transforms, laplace_2pi=config.laplace_2pi)
    weights = AdaptiveWeights(config.epsilon, config.adaptive)
    generator = FeatureGenerator(scorer, config, weights)
    population, _ = init_population(scorer, config, generator, rng, weights)
    s = config.population_size(scorer.X.shape[1])

    trace: list[GenerationRecord] = []
    state = ChainState(0, 0.0)
    pscorer = PopulationScorer(scorer, population.features)
    _project_state(state, None, pscorer)
    steps = accepted = 0
    for t in range(1, config.T_max):
        rate, seen = _run_segment(pscorer, state, config.N_expl, config.mjmcmc, rng)
        incl = segment_inclusion(sorted(seen), scorer.registry, pscorer.keys)
        weights.update(incl)
        trace.append(GenerationRecord(t, pscorer.keys, rate, scorer.registry.best()[1].log_mass, len(scorer.registry)))
        survivors, removed = filtrate(population, incl, config, rng)
        n_new = removed + max(0, s - len(population))
        population = transition(Population(survivors, population.generation), n_new, generator, rng)
        old = pscorer
        pscorer = PopulationScorer(scorer, population.features)
        _project_state(state, old, pscorer)

    # final segment on the last population
    target = None
    if config.final_unique_models is not None:
        target = len(scorer.registry) + config.final_unique_models
    n_done = 0
    rates = []
    limit = config.N_final if target is None else max(config.N_final, 50 * config.final_unique_models)
    while n_done < limit:
        chunk = min(config.N_final if target is None else 500, limit - n_done)
        rate, _ = _run_segment(pscorer, state, chunk, config.mjmcmc, rng)
        rates.append(rate)
        n_done += chunk
        if target is not None and len(scorer.registry) >= target and n_done >= config.N_final:
            break
    trace.append(GenerationRecord(config.T_max, pscorer.keys, float(np.mean(rates)) if rates else 0.0,
                                  scorer.registry.best()[1].log_mass, len(scorer.registry)))
    return ChainResult(scorer.registry, trace, state.visit_counts, population, scorer.glm_calls,
                       state.proposals, state.accepted)


# ---------------------------------------------------------------------------
# reversible variant


@dataclass
class RgmjmcmcState:
    model: tuple[Feature, ...]
    log_mass: float
    visit_counts: dict[ModelKey, int] = field(default_factory=dict)
    proposals: int = 0
    stage1_accepted: int = 0
    accepted: int = 0
    backward_searches: int = 0
    population: Population | None = None

    @property
    def key(self) -> ModelKey:
        return tuple(f.key for f in self.model)

    def record(self) -> None:
        k = self.key
        self.visit_counts[k] = self.visit_counts.get(k, 0) + 1


def propose_population(model: Sequence[Feature], s: int, generator: FeatureGenerator,
                       rng: np.random.Generator) -> Population:
    """Population proposal: all members of ``model`` plus generated features."""
    base = Population(list(model))
    return transition(base, max(0, s - len(base)), generator, rng, operands=base.features)


def _local_search(pscorer: PopulationScorer, start_keys: Sequence[str], config: MjmcmcConfig,
                  rng: np.random.Generator) -> int:
    s, Q = pscorer.s, pscorer.Q
    start = pscorer.mask_of(start_keys)
    jumped = large_jump(start, s, config.jump_range(s), Q, rng)
    return local_optimize(jumped, config.local_opt_steps, pscorer, s, Q)


def rgmjmcmc_step(state: RgmjmcmcState, config: GmjmcmcConfig, generator: FeatureGenerator,
                  rng: np.random.Generator) -> RgmjmcmcState:
    """One reversible population-swap step with delayed acceptance.

    Stage 1 accepts with ``min(1, p(m'|y)/p(m|y))``; only then is the
    backward population drawn and searched, and stage 2 accepts with the
    randomization density ratio.
    """
    scorer = generator.scorer
    m = scorer.X.shape[1]
    s = config.population_size(m)
    rho = config.rho_r
    state.proposals += 1

    forward = propose_population(state.model, s, generator, rng)
    fwd = generator.scorer_for(forward)
    mode_f = _local_search(fwd, state.key, config.mjmcmc, rng)
    prop = randomize(mode_f, rho, fwd.s, rng)
    prop_val = fwd(prop)
    log_a1 = prop_val - state.log_mass if prop_val != NEG_INF else NEG_INF
    if not accept(log_a1, rng):
        state.record()
        return state
    state.stage1_accepted += 1

    prop_keys = fwd.model_key(prop)
    prop_model = tuple(fwd.features[i] for i in bits(prop))
    state.backward_searches += 1
    backward = propose_population(prop_model, s, generator, rng)
    bwd = generator.scorer_for(backward)
    if any(k not in bwd.index for k in state.key):
        state.record()
        return state
    mode_b = _local_search(bwd, prop_keys, config.mjmcmc, rng)
    log_a2 = (log_q_randomize(mode_b, bwd.mask_of(state.key), rho, bwd.s)
              - log_q_randomize(mode_f, prop, rho, fwd.s))
    if accept(log_a2, rng):
        state.model = prop_model
        state.log_mass = prop_val
        state.accepted += 1
        state.population = forward
    state.record()
    return state


def run_rgmjmcmc(X: np.ndarray, y: np.ndarray, family: glm.Family | str, config: GmjmcmcConfig,
                 n_steps: int, seed: int | np.random.Generator | None = None,
                 scorer: ModelScorer | None = None, trace_every: int = 1000) -> ChainResult:
    """Reversible GMJMCMC started from the best model of an initial MJMCMC run."""
    rng = np.random.default_rng(seed)
    transforms = TransformationSet.from_names(config.transforms) if config.transforms else None
    if scorer is None:
        scorer = ModelScorer(X, y, family, config.a, config.Q, transforms, laplace_2pi=config.laplace_2pi)
    weights = AdaptiveWeights(config.epsilon, config.adaptive)
    generator = FeatureGenerator(scorer, config, weights)
    population, _ = init_population(scorer, config, generator, rng, weights)
    start = PopulationScorer(scorer, population.features)
    state0 = ChainState(0, start(0))
    _run_segment(start, state0, config.N_init, config.mjmcmc, rng)
    model = tuple(start.features[i] for i in bits(state0.current))
    state = RgmjmcmcState(model, state0.log_mass, population=population)
    trace: list[GenerationRecord] = []
    window_acc = 0
    for step in range(1, n_steps + 1):
        before = state.accepted
        rgmjmcmc_step(state, config, generator, rng)
        window_acc += state.accepted - before
        if weights.enabled:
            weights.update({k: 1.0 for k in state.key})
        if step % trace_every == 0 or step == n_steps:
            pop = state.population.keys if state.population is not None else []
            trace.append(GenerationRecord(step, pop, window_acc / trace_every,
                                          scorer.registry.best()[1].log_mass, len(scorer.registry)))
            window_acc = 0
    final_pop = state.population if state.population is not None else population
    return ChainResult(scorer.registry, trace, state.visit_counts, final_pop, scorer.glm_calls,
                       state.proposals, state.accepted)
