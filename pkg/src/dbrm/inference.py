"""Posterior summaries, run merging, model-averaged prediction and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from . import glm
from .features import Feature, complexity, evaluate
from .scoring import ModelKey, ModelRegistry, key_string
from .transforms import TransformationSet

RETAIN_THRESHOLD = 1e-6


@dataclass
class PosteriorSummary:
    """Model posteriors, inclusion probabilities and the run mass.

    ``log_run_mass`` is ``log s_b``, the log of the summed unnormalized
    posterior mass the run discovered.  It is kept on the log scale because
    ``s_b`` itself usually underflows.
    """

    model_posteriors: dict[ModelKey, float]
    inclusion_probs: dict[str, float]
    log_run_mass: float = 0.0
    features: dict[str, Feature] = field(default_factory=dict)

    @property
    def run_mass(self) -> float:
        return math.exp(self.log_run_mass)

    def top_models(self, k: int = 10) -> list[tuple[ModelKey, float]]:
        return sorted(self.model_posteriors.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    def detected(self, eta: float) -> list[str]:
        return sorted(f for f, p in self.inclusion_probs.items() if p >= eta)

    def expected_size(self) -> float:
        return sum(p * len(m) for m, p in self.model_posteriors.items())


def _inclusion(posteriors: Mapping[ModelKey, float]) -> dict[str, float]:
    out: dict[str, float] = {}
    for m, p in posteriors.items():
        for f in m:
            out[f] = out.get(f, 0.0) + p
    # summation error can push a certain feature a hair above one
    return {f: min(p, 1.0) for f, p in out.items()}


def renormalized_posteriors(registry: ModelRegistry) -> PosteriorSummary:
    """Softmax of log mass over every registered model."""
    if len(registry) == 0:
        raise ValueError("registry is empty")
    keys = list(registry.scores.keys())
    lm = registry.log_masses()
    z = float(logsumexp(lm))
    p = np.exp(lm - z)
    p /= p.sum()
    post = dict(zip(keys, p.tolist()))
    return PosteriorSummary(post, _inclusion(post), z, dict(registry.features))


def frequency_posteriors(visit_counts: Mapping[ModelKey, int], registry: ModelRegistry | None = None) -> PosteriorSummary:
    """Empirical visit frequencies of a chain."""
    total = sum(visit_counts.values())
    if total <= 0:
        raise ValueError("no visits recorded")
    post = {m: c / total for m, c in visit_counts.items() if c > 0}
    z = 0.0
    feats = {}
    if registry is not None:
        lm = [registry.get(m).log_mass for m in post if registry.get(m) is not None]
        z = float(logsumexp(lm)) if lm else 0.0
        feats = dict(registry.features)
    return PosteriorSummary(post, _inclusion(post), z, feats)


def merge_weights(summaries: Sequence[PosteriorSummary]) -> np.ndarray:
    """``u_b = s_b / sum s_b'`` computed on the log scale."""
    ls = np.array([s.log_run_mass for s in summaries], dtype=float)
    return np.exp(ls - logsumexp(ls))


def merge_runs(summaries: Sequence[PosteriorSummary]) -> PosteriorSummary:
    """Weighted sum of per-run statistics with weights proportional to run mass."""
    if not summaries:
        raise ValueError("nothing to merge")
    if len(summaries) == 1:
        return summaries[0]
    u = merge_weights(summaries)
    models: dict[ModelKey, float] = {}
    incl: dict[str, float] = {}
    feats: dict[str, Feature] = {}
    for w, s in zip(u, summaries):
        for m, p in s.model_posteriors.items():
            models[m] = models.get(m, 0.0) + w * p
        for f, p in s.inclusion_probs.items():
            incl[f] = incl.get(f, 0.0) + w * p
        for k, f in s.features.items():
            feats.setdefault(k, f)
    incl = {f: min(p, 1.0) for f, p in incl.items()}
    z = float(logsumexp([s.log_run_mass for s in summaries]))
    return PosteriorSummary(models, incl, z, feats)


def total_variation(p: Mapping, q: Mapping) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class ModelFit:
    key: ModelKey
    posterior: float
    coefficients: np.ndarray


def fit_models(summary: PosteriorSummary, X: np.ndarray, y: np.ndarray, family: glm.Family | str,
               transforms: TransformationSet | None = None,
               threshold: float = RETAIN_THRESHOLD) -> list[ModelFit]:
    """Posterior-mode coefficients for every model with posterior above ``threshold``.

    Posteriors of the retained models are renormalized to sum to one.
    """
    family = glm.get_family(family)
    cache: dict[str, np.ndarray] = {}
    kept = [(m, p) for m, p in summary.model_posteriors.items() if p > threshold]
    if not kept:
        kept = [max(summary.model_posteriors.items(), key=lambda kv: kv[1])]
    total = sum(p for _, p in kept)
    fits = []
    for m, p in kept:
        design = _design([summary.features[k] for k in m], X, transforms, cache)
        fit = glm.fit_mle(family, design, y)
        fits.append(ModelFit(m, p / total, fit.coefficients))
    return fits


def _design(features: Sequence[Feature], X: np.ndarray, transforms, cache) -> np.ndarray:
    cols = [np.ones(X.shape[0])] + [evaluate(f, X, transforms, cache) for f in features]
    return np.column_stack(cols)


def model_average_predict(fits: Sequence[ModelFit], features: Mapping[str, Feature], X_new: np.ndarray,
                          family: glm.Family | str, eta: float = 0.5,
                          transforms: TransformationSet | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Posterior-weighted plug-in predictions; labels for the bernoulli family."""
    family = glm.get_family(family)
    X_new = np.asarray(X_new, dtype=float)
    cache: dict[str, np.ndarray] = {}
    out = np.zeros(X_new.shape[0])
    for fit in fits:
        design = _design([features[k] for k in fit.key], X_new, transforms, cache)
        out += fit.posterior * glm.predict_mean(family, fit.coefficients, design)
    labels = None if family.is_gaussian else (out >= eta).astype(int)
    return out, labels


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ClassificationMetrics:
    acc: float
    fpr: float | None
    fnr: float | None


def classification_metrics(y_hat: Sequence[int], y_true: Sequence[int]) -> ClassificationMetrics:
    """Accuracy, false positive rate and false negative rate.

    A rate whose denominator class is absent is reported as ``None``.
    """
    yh = np.asarray(y_hat).astype(int)
    yt = np.asarray(y_true).astype(int)
    if yh.shape != yt.shape:
        raise ValueError("y_hat and y_true differ in length")
    if yh.size == 0:
        raise ValueError("no observations")
    if not (np.isin(yh, (0, 1)).all() and np.isin(yt, (0, 1)).all()):
        raise ValueError("labels must be 0 or 1")
    acc = float(np.mean(yh == yt))
    neg, pos = yt == 0, yt == 1
    fpr = float(np.mean(yh[neg] == 1)) if neg.any() else None
    fnr = float(np.mean(yh[pos] == 0)) if pos.any() else None
    return ClassificationMetrics(acc, fpr, fnr)


@dataclass(frozen=True)
class DiscoveryMetrics:
    power: float
    fp: float
    fdr: float


def discovery_metrics(runs: Sequence[Iterable[str]], truth: Sequence[Iterable[str] | str]) -> DiscoveryMetrics:
    """Power, mean false positive count and false discovery rate over runs.

    ``truth`` lists the true effects; each entry is a key or a set of
    equivalent keys, any of which counts as detecting that effect.  A run
    that detects nothing contributes 0 to the FDR average.
    """
    if not runs:
        raise ValueError("no runs")
    groups = [{t} if isinstance(t, str) else set(t) for t in truth]
    all_true = set().union(*groups) if groups else set()
    hits = np.zeros(len(groups))
    fps, fdrs = [], []
    for detected in runs:
        det = set(detected)
        for j, g in enumerate(groups):
            if det & g:
                hits[j] += 1
        false = det - all_true
        fps.append(len(false))
        fdrs.append(len(false) / len(det) if det else 0.0)
    power = float(hits.mean() / len(runs)) if groups else 0.0
    return DiscoveryMetrics(power, float(np.mean(fps)), float(np.mean(fdrs)))


def per_effect_power(runs: Sequence[Iterable[str]], truth: Sequence[Iterable[str] | str]) -> list[float]:
    groups = [{t} if isinstance(t, str) else set(t) for t in truth]
    n = len(runs)
    return [sum(1 for r in runs if set(r) & g) / n for g in groups]


# ---------------------------------------------------------------------------
# reports


def write_feature_report(summary: PosteriorSummary, fh: IO[str], names: Sequence[str] | None = None,
                         min_prob: float = 0.0) -> None:
    """Tab-separated: rank, canonical key, readable form, complexity, inclusion probability."""
    w = csv.writer(fh, delimiter="\t", lineterminator="\n")
    w.writerow(["rank", "key", "feature", "complexity", "inclusion"])
    ranked = sorted(summary.inclusion_probs.items(), key=lambda kv: (-kv[1], kv[0]))
    for rank, (k, p) in enumerate((kv for kv in ranked if kv[1] >= min_prob), start=1):
        f = summary.features.get(k)
        readable = f.infix(names) if f is not None else k
        c = complexity(f).total_width if f is not None else ""
        w.writerow([rank, k, readable, c, repr(float(p))])


def write_model_report(summary: PosteriorSummary, registry: ModelRegistry, fh: IO[str],
                       top: int | None = None) -> None:
    """Tab-separated: model key, posterior, log mass."""
    w = csv.writer(fh, delimiter="\t", lineterminator="\n")
    w.writerow(["key", "posterior", "log_mass"])
    items = sorted(summary.model_posteriors.items(), key=lambda kv: (-kv[1], kv[0]))
    if top is not None:
        items = items[:top]
    for m, p in items:
        s = registry.get(m)
        w.writerow([key_string(m), repr(float(p)), repr(s.log_mass) if s is not None else ""])


def read_feature_report(fh: IO[str]) -> list[dict]:
    rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["rank"] = int(r["rank"])
        r["inclusion"] = float(r["inclusion"])
        r["complexity"] = int(r["complexity"]) if r["complexity"] else None
    return rows


def read_model_report(fh: IO[str]) -> list[dict]:
    rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["features"] = tuple(r["key"].split("|")) if r["key"] else ()
        r["posterior"] = float(r["posterior"])
        r["log_mass"] = float(r["log_mass"]) if r["log_mass"] else None
    return rows
