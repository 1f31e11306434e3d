"""Named nonlinear transformations used to build features.

Every transformation is total: partial functions are replaced by an
extension that is finite for every finite input (``log`` becomes
``log(|x| + 1)``, powers act on ``|x|``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def sigmoid(x):
    return expit(x)


def gauss(x):
    return np.exp(-np.square(x))


def troot(x):
    return np.cbrt(np.abs(x))


def log1pabs(x):
    return np.log1p(np.abs(x))


def expnegabs(x):
    return np.exp(-np.abs(x))


def pow2_3(x):
    return np.abs(x) ** 2.3


def pow3_5(x):
    return np.abs(x) ** 3.5


def relu(x):
    return np.maximum(x, 0.0)


def safe_exp(x):
    return np.exp(np.minimum(x, 700.0))


BUILTIN: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sigmoid": sigmoid,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "atan": np.arctan,
    "gauss": gauss,
    "troot": troot,
    "log": log1pabs,
    "expnegabs": expnegabs,
    "pow2_3": pow2_3,
    "pow3_5": pow3_5,
    "relu": relu,
    "exp": safe_exp,
}

PRESETS: dict[str, tuple[str, ...]] = {
    # prediction examples
    "classification": ("gauss", "tanh", "atan", "sin"),
    # exoplanet examples
    "g1": ("sigmoid", "sin", "tanh", "atan", "troot"),
    "g2": ("sigmoid", "sin", "expnegabs", "log", "troot", "pow2_3", "pow3_5"),
    "sigmoid": ("sigmoid",),
}


@dataclass(frozen=True)
class Transformation:
    name: str
    func: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.func(x)


class TransformationSet:
    """An ordered collection of uniquely named transformations."""

    def __init__(self, entries: Iterable[Transformation]):
        self._entries: dict[str, Transformation] = {}
        for t in entries:
            if not _NAME_RE.match(t.name):
                raise ValueError(f"invalid transformation name {t.name!r}")
            if t.name in self._entries:
                raise ValueError(f"duplicate transformation name {t.name!r}")
            self._entries[t.name] = t

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "TransformationSet":
        entries = []
        for name in names:
            if name not in BUILTIN:
                raise KeyError(f"unknown transformation {name!r}")
            entries.append(Transformation(name, BUILTIN[name]))
        return cls(entries)

    @classmethod
    def preset(cls, name: str) -> "TransformationSet":
        if name not in PRESETS:
            raise KeyError(f"unknown transformation preset {name!r}; choose from {sorted(PRESETS)}")
        return cls.from_names(PRESETS[name])

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def __getitem__(self, name: str) -> Transformation:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.values())

    def __repr__(self):
        return f"TransformationSet({self.names})"
