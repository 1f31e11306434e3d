"""Datasets, splits, the combinatorial simulation and run configuration files."""

from __future__ import annotations

import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .transforms import BUILTIN, PRESETS


class DataError(ValueError):
    """Problems with an input data file."""


class ConfigError(ValueError):
    """Problems with a run configuration."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    column_names: list[str]
    response_name: str = "y"
    offset: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be n x m with n matching len(y)")
        if len(self.column_names) != self.X.shape[1]:
            raise DataError("one column name per covariate required")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise DataError("non-finite values in dataset")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.y, (0.0, 1.0))))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        off = None if self.offset is None else self.offset[rows]
        return Dataset(self.X[rows], self.y[rows], list(self.column_names), self.response_name, off)


_MISSING = {"", "na", "nan", "null", "none", "?"}


def load_csv(path: str | Path, response_column: str | int | None = None, offset_column: str | None = None,
             delimiter: str | None = None, covariates: Sequence[str] | None = None,
             response_optional: bool = False) -> Dataset:
    """Read a delimited file with a header row.

    Rows with a missing entry in a used column are dropped with a warning.
    A cell that is present but not numeric raises :class:`DataError` naming
    the row (1-based, header is row 1) and column.  ``response_column``
    defaults to the last column.  With ``response_optional`` a file without
    the response column loads with ``y`` set to zeros.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        try:
            delimiter = csv.Sniffer().sniff(text.splitlines()[0] if text else ",", delimiters=",;\t").delimiter
        except csv.Error:
            delimiter = ","
    rows = list(csv.reader(text.splitlines(), delimiter=delimiter))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    if response_column is None:
        response_column = header[-1]
    if isinstance(response_column, int):
        response_column = header[response_column]
    no_response = response_column not in header
    if no_response and not response_optional:
        raise DataError(f"{path}: response column {response_column!r} not found")
    if offset_column is not None and offset_column not in header:
        raise DataError(f"{path}: offset column {offset_column!r} not found")
    if covariates is None:
        covariates = [h for h in header if h not in (response_column, offset_column)]
    missing_cols = [c for c in covariates if c not in header]
    if missing_cols:
        raise DataError(f"{path}: covariate columns not found: {', '.join(missing_cols)}")
    used = list(covariates) + ([] if no_response else [response_column]) + ([offset_column] if offset_column else [])
    idx = [header.index(c) for c in used]

    values = []
    dropped = 0
    for r_no, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r_no} has {len(row)} fields, expected {len(header)}")
        cells = [row[i].strip() for i in idx]
        if any(c.lower() in _MISSING for c in cells):
            dropped += 1
            continue
        parsed = []
        for c, name in zip(cells, used):
            try:
                parsed.append(float(c))
            except ValueError:
                raise DataError(f"{path}: row {r_no}, column {name!r}: cannot parse {c!r}") from None
        values.append(parsed)
    if dropped:
        warnings.warn(f"{path}: dropped {dropped} row(s) with missing values", stacklevel=2)
    if not values:
        raise DataError(f"{path}: no complete rows")
    arr = np.array(values, dtype=float).reshape(len(values), len(used))
    k = len(covariates)
    y = np.zeros(len(values)) if no_response else arr[:, k]
    offset = arr[:, -1] if offset_column else None
    ds = Dataset(arr[:, :k], y, list(covariates), response_column, offset, dropped)
    return ds


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.column_names) + [ds.response_name])
        for row, yi in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [repr(float(yi))])


# ---------------------------------------------------------------------------
# simulation

SIM_TERMS: list[tuple[tuple[int, ...], float]] = [
    ((7,), 1.5),
    ((8,), 1.5),
    ((18, 21), 6.6),
    ((2, 9), 3.5),
    ((12, 20, 37), 9.0),
    ((1, 3, 27), 7.0),
    ((4, 10, 17, 30), 7.0),
    ((11, 13, 19, 50), 7.0),
]
SIM_INTERCEPT = 1.0


def simulate_combinatorial(seed: int | None = None, n: int = 1000, p: int = 50) -> Dataset:
    """Binary covariates with a sparse set of high-order interactions.

    Term indices in ``SIM_TERMS`` are 1-based covariate numbers.
    """
    need = max(i for idx, _ in SIM_TERMS for i in idx)
    if p < need:
        raise ValueError(f"the generating terms use covariates up to X{need}; p={p} is too small")
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(n, p)).astype(float)
    mu = np.full(n, SIM_INTERCEPT)
    for idx, coef in SIM_TERMS:
        mu += coef * np.prod(X[:, [i - 1 for i in idx]], axis=1)
    y = mu + rng.standard_normal(n)
    return Dataset(X, y, [f"X{j}" for j in range(1, p + 1)], "Y")


def simulation_design(X: np.ndarray) -> np.ndarray:
    cols = [np.ones(X.shape[0])] + [np.prod(X[:, [i - 1 for i in idx]], axis=1) for idx, _ in SIM_TERMS]
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# splitting


def split(ds: Dataset, train_fraction: float | None = None, seed: int | None = None,
          train_indices: Sequence[int] | None = None, balanced: int | None = None) -> tuple[Dataset, Dataset]:
    """Disjoint, exhaustive train/test split.

    Exactly one of ``train_fraction``, ``train_indices`` or ``balanced``
    selects the training rows.  ``balanced=k`` draws ``k`` rows from each
    class of a binary response.
    """
    n = ds.n
    rng = np.random.default_rng(seed)
    chosen = [x is not None for x in (train_fraction, train_indices, balanced)]
    if sum(chosen) != 1:
        raise ValueError("give exactly one of train_fraction, train_indices, balanced")
    if train_indices is not None:
        train = np.unique(np.asarray(train_indices, dtype=int))
        if train.size and (train.min() < 0 or train.max() >= n):
            raise ValueError("train indices out of range")
    elif train_fraction is not None:
        if not 0.0 <= train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")
        k = int(round(train_fraction * n))
        train = np.sort(rng.permutation(n)[:k])
    else:
        if not ds.is_binary:
            raise ValueError("balanced split needs a binary response")
        parts = []
        for cls in (0.0, 1.0):
            members = np.flatnonzero(ds.y == cls)
            if members.size < balanced:
                raise ValueError(f"balanced split infeasible: class {int(cls)} has {members.size} < {balanced} rows")
            parts.append(rng.choice(members, size=balanced, replace=False))
        train = np.sort(np.concatenate(parts))
    mask = np.zeros(n, dtype=bool)
    mask[train] = True
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Settings for one fit.  Every field can be set in a ``key = value`` file."""

    family: str = "bernoulli"
    transforms: str = "g1"
    D_max: int = 5
    Q: int = 20
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
    adaptive: bool = True
    rho_r: float = 0.02
    rg_steps: int = 2000
    threads: int = 1
    seed: int = 0
    eta: float = 0.5
    eta_star: float = 0.25
    algorithm: str = "gmjmcmc"
    response: str | None = None
    laplace_2pi: bool = True
    keep_always: tuple[int, ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("P_m", "P_c", "P_t", "P_p", "P_del", "eta", "eta_star", "filtration_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if abs(self.P_m + self.P_c + self.P_t + self.P_p - 1.0) > 1e-9:
            raise ConfigError("P_m + P_c + P_t + P_p must equal 1")
        if not 0.0 < self.a < 1.0:
            raise ConfigError(f"a must lie in (0, 1), got {self.a}")
        if self.D_max < 0:
            raise ConfigError("D_max must be >= 0")
        if self.Q < 1:
            raise ConfigError("Q must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.algorithm not in ("gmjmcmc", "rgmjmcmc"):
            raise ConfigError(f"algorithm must be gmjmcmc or rgmjmcmc, got {self.algorithm!r}")
        if self.family not in ("gaussian", "bernoulli", "binomial", "logistic"):
            raise ConfigError(f"unknown family {self.family!r}")
        self.transform_names()

    def transform_names(self) -> tuple[str, ...]:
        if self.transforms in PRESETS:
            return tuple(PRESETS[self.transforms])
        names = tuple(t.strip() for t in self.transforms.split(",") if t.strip())
        unknown = [t for t in names if t not in BUILTIN]
        if unknown:
            raise ConfigError(f"transforms: unknown transformation(s) {', '.join(unknown)}")
        return names

    def gmjmcmc_config(self):
        from .gmjmcmc import GmjmcmcConfig

        return GmjmcmcConfig(
            Q=self.Q, D_max=self.D_max, a=self.a, s=self.s, T_max=self.T_max, N_init=self.N_init,
            N_expl=self.N_expl, N_final=self.N_final, final_unique_models=self.final_unique_models,
            P_m=self.P_m, P_c=self.P_c, P_t=self.P_t, P_p=self.P_p, P_del=self.P_del,
            filtration_threshold=self.filtration_threshold, keep_always=tuple(self.keep_always),
            adaptive=self.adaptive, transforms=self.transform_names(), rho_r=self.rho_r,
            laplace_2pi=self.laplace_2pi,
        )

    def with_updates(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    f = {f.name: f for f in dataclasses.fields(RunConfig)}[name]
    typ = str(f.type)
    try:
        if raw.lower() in ("none", "") and "None" in typ:
            return None
        if typ.startswith("bool"):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return _parse_float(raw)
        if typ.startswith("tuple"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse value {raw!r}") from None


def _parse_float(raw: str) -> float:
    # allow exp(...) for prior parameters such as a = exp(-2)
    low = raw.replace(" ", "").lower()
    if low.startswith("exp(") and low.endswith(")"):
        return math.exp(float(low[4:-1]))
    return float(raw)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    updates = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"line {ln}: unknown field {key!r}")
        updates[key] = _parse_value(key, val, None)
    base = base or RunConfig()
    try:
        return dataclasses.replace(base, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base)


def bundled_data_path(name: str) -> Path:
    return Path(__file__).resolve().parent / "data" / name
