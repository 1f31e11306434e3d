"""Chain orchestration and the replication protocols behind ``dbrm experiment``.

Every chain is seeded with ``master_seed + chain_index``; replication ``r``
of an experiment uses master seed ``seed + 1000 * r``.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import inference
from .data_io import DataError, Dataset, RunConfig, bundled_data_path, load_csv, simulate_combinatorial, split
from .features import Leaf, Product, Transform
from .gmjmcmc import ChainResult, ConfigurationError, run_gmjmcmc, run_rgmjmcmc
from .scoring import ModelRegistry
from .transforms import TransformationSet

log = logging.getLogger(__name__)

REPLICATION_SEED_STRIDE = 1000


@dataclass
class FitResult:
    chains: list[ChainResult]
    summaries: list[inference.PosteriorSummary]
    merged: inference.PosteriorSummary
    registry: ModelRegistry
    frequency: inference.PosteriorSummary | None = None
    seconds: float = 0.0

    @property
    def glm_calls(self) -> int:
        return sum(c.glm_calls for c in self.chains)


def run_chain(X: np.ndarray, y: np.ndarray, config: RunConfig, seed: int) -> ChainResult:
    gcfg = config.gmjmcmc_config()
    if config.algorithm == "rgmjmcmc":
        return run_rgmjmcmc(X, y, config.family, gcfg, config.rg_steps, seed=seed)
    return run_gmjmcmc(X, y, config.family, gcfg, seed=seed)


def fit(X: np.ndarray, y: np.ndarray, config: RunConfig, seed: int | None = None) -> FitResult:
    """Run ``config.threads`` independent chains and merge their summaries."""
    seed = config.seed if seed is None else seed
    t0 = time.perf_counter()
    chains, summaries, freqs = [], [], []
    registry = ModelRegistry()
    for b in range(config.threads):
        try:
            res = run_chain(X, y, config, seed + b)
        except ConfigurationError:
            raise
        except Exception as err:
            raise ChainFailure(b, err) from err
        chains.append(res)
        registry.update(res.registry)
        summaries.append(inference.renormalized_posteriors(res.registry))
        if config.algorithm == "rgmjmcmc":
            freqs.append(inference.frequency_posteriors(res.visit_counts, res.registry))
    merged = inference.merge_runs(summaries)
    freq = inference.merge_runs(freqs) if freqs else None
    return FitResult(chains, summaries, merged, registry, freq, time.perf_counter() - t0)


class ChainFailure(RuntimeError):
    def __init__(self, chain: int, err: Exception):
        super().__init__(f"chain {chain} failed: {err}")
        self.chain = chain


# ---------------------------------------------------------------------------
# protocols


@dataclass
class Protocol:
    name: str
    kind: str  # "classification" or "discovery"
    config: RunConfig
    data: Callable[[int, "Protocol"], tuple[Dataset, Dataset | None]]
    truth: Callable[[Dataset], list[set[str]]] | None = None
    truth_labels: list[str] = field(default_factory=list)
    data_file: str | None = None


def _bundled(name: str, override: str | None, env: str) -> Path:
    for cand in (override, os.environ.get(env), bundled_data_path(name)):
        if cand and Path(cand).exists():
            return Path(cand)
    raise DataError(
        f"data file {name} is not bundled; pass --data PATH or set {env} to a local copy")


def _breast(rep: int, proto: Protocol):
    ds = load_csv(_bundled("breast_cancer.csv", proto.data_file, "DBRM_BREAST_CSV"), "malignant")
    return split(ds, train_fraction=0.25, seed=proto.config.seed + REPLICATION_SEED_STRIDE * rep)


def _spam(rep: int, proto: Protocol):
    ds = load_csv(_bundled("spam.csv", proto.data_file, "DBRM_SPAM_CSV"))
    return split(ds, train_fraction=0.25, seed=proto.config.seed + REPLICATION_SEED_STRIDE * rep)


def _asteroid(rep: int, proto: Protocol):
    ds = load_csv(_bundled("neo.csv", proto.data_file, "DBRM_NEO_CSV"))
    return split(ds, balanced=32, seed=proto.config.seed + REPLICATION_SEED_STRIDE * rep)


def _exoplanet(response: str):
    def load(rep: int, proto: Protocol):
        ds = load_csv(_bundled("exoplanet.csv", proto.data_file, "DBRM_EXOPLANET_CSV"), response,
                      covariates=[c for c in EXOPLANET_COVARIATES if c != response] + (
                          ["PlanetaryMassJpt"] if response == "SemiMajorAxisAU" else []))
        return ds, None
    return load


def _simstudy(rep: int, proto: Protocol):
    return simulate_combinatorial(proto.config.seed + REPLICATION_SEED_STRIDE * rep), None


EXOPLANET_COVARIATES = [
    "TypeFlag", "RadiusJpt", "PeriodDays", "SemiMajorAxisAU", "Eccentricity", "HostStarMassSlrMass",
    "HostStarRadiusSlrRad", "HostStarMetallicity", "HostStarTempK", "PlanetaryDensJpt",
]


def _col(ds: Dataset, name: str) -> Leaf:
    return Leaf(ds.column_names.index(name))


def _mass_truth(ds: Dataset) -> list[set[str]]:
    r, rho = _col(ds, "RadiusJpt"), _col(ds, "PlanetaryDensJpt")
    return [{Product((r, r, r, rho)).key}]


def _kepler_truth(ds: Dataset) -> list[set[str]]:
    p = _col(ds, "PeriodDays")
    keys = {Transform("troot", Product((p, p, _col(ds, h)))).key
            for h in ("HostStarMassSlrMass", "HostStarRadiusSlrRad", "HostStarTempK")}
    return [keys]


def _sim_truth(ds: Dataset) -> list[set[str]]:
    from .data_io import SIM_TERMS

    out = []
    for idx, _ in SIM_TERMS:
        leaves = [Leaf(i - 1) for i in idx]
        out.append({(leaves[0] if len(leaves) == 1 else Product(leaves)).key})
    return out


def _sim_labels() -> list[str]:
    from .data_io import SIM_TERMS

    return ["*".join(f"X{i}" for i in idx) for idx, _ in SIM_TERMS]


def protocols() -> dict[str, Protocol]:
    classification = dict(family="bernoulli", transforms="classification", a=math.exp(-2.0), Q=20, D_max=5,
                          eta=0.5)
    exo = dict(family="gaussian", transforms="g1", D_max=5, Q=15, a=math.exp(-2.0 * math.log(223)),
               T_max=40, N_init=250, N_expl=250, N_final=2000, final_unique_models=10000, eta_star=0.25,
               threads=16)
    return {
        "breast": Protocol("breast", "classification",
                           RunConfig(**classification, threads=8, T_max=10, N_init=200, N_expl=200, N_final=600),
                           _breast),
        "spam": Protocol("spam", "classification",
                         RunConfig(**classification, threads=8, T_max=10, N_init=200, N_expl=200, N_final=600),
                         _spam),
        "asteroid": Protocol("asteroid", "classification",
                             RunConfig(**classification, threads=8, T_max=10, N_init=200, N_expl=200, N_final=600),
                             _asteroid),
        "mass": Protocol("mass", "discovery", RunConfig(**exo, response="PlanetaryMassJpt"),
                         _exoplanet("PlanetaryMassJpt"), _mass_truth, ["R*R*R*rho"]),
        "kepler": Protocol("kepler", "discovery",
                           RunConfig(**{**exo, "final_unique_models": 20000}, response="SemiMajorAxisAU"),
                           _exoplanet("SemiMajorAxisAU"), _kepler_truth, ["(P*P*M_h)^(1/3) or equivalent"]),
        "simstudy": Protocol("simstudy", "discovery",
                             RunConfig(family="gaussian", transforms="", D_max=4, Q=20,
                                       a=math.exp(-2.0 * math.log(1000)), T_max=40, N_init=100, N_expl=100,
                                       N_final=400, P_m=0.2, P_c=0.8, P_t=0.0, P_p=0.0, P_del=0.8,
                                       eta_star=0.5, threads=8),
                             _simstudy, _sim_truth, _sim_labels()),
    }


EXPERIMENTS = ("asteroid", "breast", "spam", "mass", "kepler", "simstudy")


@dataclass
class ReplicationResult:
    replication: int
    seconds: float
    acc: float | None = None
    fpr: float | None = None
    fnr: float | None = None
    detected: list[str] = field(default_factory=list)


@dataclass
class ExperimentResult:
    name: str
    kind: str
    replications: list[ReplicationResult]
    truth: list[set[str]] = field(default_factory=list)
    truth_labels: list[str] = field(default_factory=list)

    def classification_table(self) -> dict:
        if not self.replications:
            return {}
        out = {}
        for m in ("acc", "fpr", "fnr"):
            v = np.array([getattr(r, m) for r in self.replications if getattr(r, m) is not None], dtype=float)
            out[m] = (float(np.median(v)), float(v.min()), float(v.max())) if v.size else None
        return out

    def discovery(self) -> inference.DiscoveryMetrics | None:
        if not self.replications:
            return None
        return inference.discovery_metrics([r.detected for r in self.replications], self.truth)

    def per_effect_power(self) -> list[float]:
        if not self.replications:
            return []
        return inference.per_effect_power([r.detected for r in self.replications], self.truth)

    def format_table(self) -> str:
        """Plain text table in the layout used for reporting results."""
        lines = []
        if self.kind == "classification":
            lines.append(f"{'Algorithm':<16}{'ACC':>28}{'FNR':>28}{'FPR':>28}")
            t = self.classification_table()
            cells = []
            for m in ("acc", "fnr", "fpr"):
                v = t.get(m)
                cells.append("NA" if v is None else f"{v[0]:.4f} ({v[1]:.4f},{v[2]:.4f})")
            if t:
                lines.append(f"{'DBRM':<16}" + "".join(f"{c:>28}" for c in cells))
        else:
            lines.append(f"{'Threads':<10}{'Power':>8}{'FP':>8}{'FDR':>8}")
            d = self.discovery()
            if d is not None:
                lines.append(f"{'':<10}{d.power:>8.2f}{d.fp:>8.2f}{d.fdr:>8.2f}")
                for lab, p in zip(self.truth_labels, self.per_effect_power()):
                    lines.append(f"  power {lab}: {p:.2f}")
        return "\n".join(lines)


def run_experiment(name: str, replications: int, overrides: dict | None = None, data_file: str | None = None,
                   progress: Callable[[ReplicationResult], None] | None = None) -> ExperimentResult:
    protos = protocols()
    if name not in protos:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    proto = protos[name]
    if overrides:
        proto.config = proto.config.with_updates(**overrides)
    proto.data_file = data_file
    result = ExperimentResult(name, proto.kind, [], truth_labels=proto.truth_labels)
    for rep in range(replications):
        train, test = proto.data(rep, proto)
        seed = proto.config.seed + REPLICATION_SEED_STRIDE * rep
        t0 = time.perf_counter()
        fr = fit(train.X, train.y, proto.config, seed)
        rr = ReplicationResult(rep, 0.0)
        if proto.kind == "classification":
            transforms = TransformationSet.from_names(proto.config.transform_names())
            fits = inference.fit_models(fr.merged, train.X, train.y, proto.config.family, transforms)
            _, labels = inference.model_average_predict(fits, fr.merged.features, test.X, proto.config.family,
                                                        proto.config.eta, transforms)
            m = inference.classification_metrics(labels, test.y)
            rr.acc, rr.fpr, rr.fnr = m.acc, m.fpr, m.fnr
        else:
            if not result.truth:
                result.truth = proto.truth(train)
            rr.detected = [k for k, p in fr.merged.inclusion_probs.items() if p > proto.config.eta_star]
        rr.seconds = time.perf_counter() - t0
        result.replications.append(rr)
        log.info("%s replication %d done in %.1fs", name, rep, rr.seconds)
        if progress is not None:
            progress(rr)
    return result
