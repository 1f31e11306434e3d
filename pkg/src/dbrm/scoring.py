"""Model prior, model scores and the registry of visited models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import glm
from .features import Feature, FeatureEvaluationError, evaluate, parse_key
from .transforms import TransformationSet

ModelKey = tuple[str, ...]


def model_key(feature_keys: Iterable[str]) -> ModelKey:
    keys = tuple(sorted(set(feature_keys)))
    return keys


def key_string(key: ModelKey) -> str:
    return "|".join(key)


@dataclass(frozen=True)
class ModelStructure:
    """A model: the sorted set of canonical keys of its included features."""

    feature_keys: ModelKey

    @classmethod
    def of(cls, features: Iterable[Feature | str]) -> "ModelStructure":
        return cls(model_key(f if isinstance(f, str) else f.key for f in features))

    @property
    def size(self) -> int:
        return len(self.feature_keys)

    @property
    def key(self) -> ModelKey:
        return self.feature_keys


@dataclass(frozen=True)
class ModelScore:
    log_marginal: float
    log_prior: float

    @property
    def log_mass(self) -> float:
        return self.log_marginal + self.log_prior


def log_model_prior(model: ModelStructure | Sequence[str], complexities: Mapping[str, int] | Callable[[str], int],
                    a: float) -> float:
    """``log a * sum_j c(F_j)`` over the included features."""
    if not 0.0 < a < 1.0:
        raise ValueError("a must lie in (0, 1)")
    keys = model.feature_keys if isinstance(model, ModelStructure) else model
    lookup = complexities if callable(complexities) else complexities.__getitem__
    total = 0
    for k in keys:
        try:
            total += lookup(k)
        except KeyError:
            raise KeyError(f"no complexity recorded for feature {k}") from None
    return math.log(a) * total


class ModelRegistry:
    """Every scored model with its cached score, in insertion order."""

    def __init__(self):
        self.scores: dict[ModelKey, ModelScore] = {}
        self.features: dict[str, Feature] = {}
        self._best: ModelKey | None = None

    def __len__(self):
        return len(self.scores)

    def __contains__(self, key) -> bool:
        return key in self.scores

    def __iter__(self) -> Iterator[tuple[ModelKey, ModelScore]]:
        return iter(self.scores.items())

    def get(self, key: ModelKey) -> ModelScore | None:
        return self.scores.get(key)

    def add(self, key: ModelKey, score: ModelScore, features: Iterable[Feature] = ()) -> None:
        if not math.isfinite(score.log_mass):
            raise ValueError("registered models must have a finite log mass")
        for f in features:
            self.features.setdefault(f.key, f)
        if key in self.scores:
            return
        self.scores[key] = score
        if self._best is None or score.log_mass > self.scores[self._best].log_mass:
            self._best = key

    def update(self, other: "ModelRegistry") -> None:
        for k, f in other.features.items():
            self.features.setdefault(k, f)
        for k, s in other.scores.items():
            self.add(k, s)

    def log_masses(self) -> np.ndarray:
        return np.fromiter((s.log_mass for s in self.scores.values()), float, len(self.scores))

    def best(self) -> tuple[ModelKey, ModelScore]:
        if self._best is None:
            raise ValueError("registry is empty")
        return self._best, self.scores[self._best]

    # line-delimited JSON, one record per model
    def dump(self, fh: IO[str]) -> None:
        for key, s in self.scores.items():
            rec = {
                "key": key_string(key),
                "features": list(key),
                "log_marginal": s.log_marginal,
                "log_prior": s.log_prior,
                "log_mass": s.log_mass,
            }
            fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, fh: IO[str]) -> "ModelRegistry":
        reg = cls()
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            key = tuple(rec["features"])
            feats = [parse_key(k) for k in key if k not in reg.features]
            reg.add(key, ModelScore(rec["log_marginal"], rec["log_prior"]), feats)
        return reg


class ModelScorer:
    """Scores models on one training set, caching everything it computes.

    ``glm_calls`` counts marginal-likelihood evaluations; repeated requests
    for a registered model never reach the GLM code.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, family: glm.Family | str, a: float, Q: int,
                 transforms: TransformationSet | None = None, registry: ModelRegistry | None = None,
                 laplace_2pi: bool = True):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.family = glm.get_family(family)
        if not 0.0 < a < 1.0:
            raise ValueError("a must lie in (0, 1)")
        self.a = a
        self.log_a = math.log(a)
        self.Q = Q
        self.transforms = transforms
        self.registry = registry if registry is not None else ModelRegistry()
        self.laplace_2pi = laplace_2pi
        self.values: dict[str, np.ndarray] = {}
        self.complexities: dict[str, int] = {}
        self.unscorable: set[ModelKey] = set()
        self.glm_calls = 0
        self._std: dict[str, np.ndarray] = {}
        self._yc = self.y - self.y.mean()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def column(self, f: Feature) -> np.ndarray:
        return evaluate(f, self.X, self.transforms, self.values)

    def complexity(self, f: Feature) -> int:
        c = self.complexities.get(f.key)
        if c is None:
            c = self.complexities[f.key] = f.complexity
        return c

    def standardized(self, f: Feature) -> np.ndarray:
        z = self._std.get(f.key)
        if z is None:
            z = self._std[f.key] = glm.standardized_column(self.column(f))
        return z

    @property
    def centred_y(self) -> np.ndarray:
        return self._yc

    def _log_marginal(self, feats: Sequence[Feature], fast=None) -> float:
        if fast is not None:
            lm = fast()
            if lm is not None:
                return lm
        if self.family.is_gaussian:
            Z = np.column_stack([self.standardized(f) for f in feats]) if feats else np.empty((self.n, 0))
            lm = glm.gaussian_log_marginal_fast(Z, self._yc)
            if lm is not None:
                return lm
        return glm.log_marginal(self.family, self.design(feats), self.y, self.laplace_2pi)

    def design(self, features: Sequence[Feature]) -> np.ndarray:
        cols = [np.ones(self.n)] + [self.column(f) for f in features]
        return np.column_stack(cols)

    def score(self, features: Sequence[Feature], fast=None) -> ModelScore | None:
        """Score of the model made of ``features``; ``None`` if unscorable.

        ``fast`` optionally computes the log marginal by a cheaper route; it
        returns ``None`` when the exact path is needed.
        """
        key = model_key(f.key for f in features)
        hit = self.registry.get(key)
        if hit is not None:
            return hit
        if key in self.unscorable or len(key) > self.Q:
            return None
        feats = sorted({f.key: f for f in features}.values(), key=lambda f: f.key)
        try:
            self.glm_calls += 1
            lm = self._log_marginal(feats, fast)
        except (glm.ScoreUnavailable, FeatureEvaluationError, np.linalg.LinAlgError):
            self.unscorable.add(key)
            return None
        lp = self.log_a * sum(self.complexity(f) for f in feats)
        s = ModelScore(float(lm), lp)
        if not math.isfinite(s.log_mass):
            self.unscorable.add(key)
            return None
        self.registry.add(key, s, feats)
        return s


def score_model(model: Sequence[Feature], scorer: ModelScorer) -> ModelScore | None:
    return scorer.score(model)
