"""Recursive nonlinear features over input covariates.

A feature is an immutable expression tree built from four node kinds:

* ``Leaf``       a raw covariate (depth 0),
* ``Transform``  ``g(F)`` for a named transformation ``g``,
* ``Product``    ``F1 * F2 * ...`` (associative and commutative, stored
  flattened with factors sorted by key),
* ``Projection`` ``g(a0 + sum_k a_k F_k)`` with frozen weights.

Each node carries a canonical key (prefix notation, parseable back into
the same tree by :func:`parse_key`) and a human readable infix string.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .transforms import BUILTIN, TransformationSet

WEIGHT_DIGITS = 6
REDUNDANCY_TOL = 1e-8
COUNT_SATURATED = 2**63 - 1


class FeatureRejected(ValueError):
    """A feature operator could not produce a valid feature."""


class FeatureEvaluationError(ArithmeticError):
    def __init__(self, key: str):
        super().__init__(f"feature {key} produced non-finite values")
        self.key = key


def round_sig(x: float, digits: int = WEIGHT_DIGITS) -> float:
    """Round to ``digits`` significant digits."""
    if x == 0 or not math.isfinite(x):
        return float(x)
    return float(f"{x:.{digits}g}")


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True, eq=False)
class Feature:
    key: str = field(init=False, repr=False)
    depth: int = field(init=False, repr=False)

    def __eq__(self, other):
        return isinstance(other, Feature) and other.key == self.key

    def __hash__(self):
        return hash(self.key)

    def __lt__(self, other):
        return self.key < other.key

    def __str__(self):
        return self.infix()

    def infix(self, names: Sequence[str] | None = None) -> str:
        raise NotImplementedError

    def leaves(self) -> list[int]:
        raise NotImplementedError

    @property
    def complexity(self) -> int:
        return complexity(self).total_width


@dataclass(frozen=True, eq=False)
class Leaf(Feature):
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("covariate index must be nonnegative")
        object.__setattr__(self, "key", f"x{self.index}")
        object.__setattr__(self, "depth", 0)

    def infix(self, names=None):
        return names[self.index] if names is not None else f"x{self.index}"

    def leaves(self):
        return [self.index]


@dataclass(frozen=True, eq=False)
class Transform(Feature):
    g: str
    child: Feature

    def __post_init__(self):
        object.__setattr__(self, "key", f"{self.g}({self.child.key})")
        object.__setattr__(self, "depth", 1 + self.child.depth)

    def infix(self, names=None):
        return f"{self.g}({self.child.infix(names)})"

    def leaves(self):
        return self.child.leaves()


def _product_depth(depths: Sequence[int]) -> int:
    # shallowest binary bracketing: repeatedly multiply the two shallowest operands
    heap = list(depths)
    heapq.heapify(heap)
    while len(heap) > 1:
        a = heapq.heappop(heap)
        b = heapq.heappop(heap)
        heapq.heappush(heap, 1 + max(a, b))
    return heap[0]


@dataclass(frozen=True, eq=False)
class Product(Feature):
    factors: tuple[Feature, ...]

    def __post_init__(self):
        flat: list[Feature] = []
        for f in self.factors:
            flat.extend(f.factors if isinstance(f, Product) else (f,))
        if len(flat) < 2:
            raise ValueError("a product needs at least two factors")
        flat.sort(key=lambda f: f.key)
        object.__setattr__(self, "factors", tuple(flat))
        object.__setattr__(self, "key", "*(" + ",".join(f.key for f in flat) + ")")
        object.__setattr__(self, "depth", _product_depth([f.depth for f in flat]))

    def infix(self, names=None):
        return "*".join(f.infix(names) for f in self.factors)

    def leaves(self):
        return [i for f in self.factors for i in f.leaves()]


@dataclass(frozen=True, eq=False)
class Projection(Feature):
    g: str
    intercept: float
    weights: tuple[float, ...]
    children: tuple[Feature, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.children):
            raise ValueError("weights and children differ in length")
        pairs: dict[str, tuple[float, Feature]] = {}
        for w, c in zip(self.weights, self.children):
            w = round_sig(float(w))
            if not math.isfinite(w):
                raise ValueError("projection weights must be finite")
            if w == 0.0:
                continue
            if c.key in pairs:
                raise ValueError(f"duplicate projection child {c.key}")
            pairs[c.key] = (w, c)
        if not pairs:
            raise ValueError("projection has no nonzero weights")
        intercept = round_sig(float(self.intercept))
        if not math.isfinite(intercept):
            raise ValueError("projection intercept must be finite")
        ordered = [pairs[k] for k in sorted(pairs)]
        object.__setattr__(self, "intercept", intercept)
        object.__setattr__(self, "weights", tuple(w for w, _ in ordered))
        object.__setattr__(self, "children", tuple(c for _, c in ordered))
        body = ";".join(f"{_fmt(w)}*{c.key}" for w, c in ordered)
        object.__setattr__(self, "key", f"@{self.g}({_fmt(intercept)};{body})")
        object.__setattr__(self, "depth", 1 + max(c.depth for c in self.children))

    def infix(self, names=None):
        parts = [f"{self.intercept:.4g}"] if self.intercept != 0 else []
        for w, c in zip(self.weights, self.children):
            term = f"{abs(w):.4g}*{c.infix(names)}"
            if parts:
                parts.append(("-" if w < 0 else "+") + term)
            else:
                parts.append(("-" if w < 0 else "") + term)
        return f"{self.g}({''.join(parts)})"

    def leaves(self):
        return [i for c in self.children for i in c.leaves()]


# ---------------------------------------------------------------------------
# complexity


@dataclass(frozen=True)
class ComplexityReport:
    depth: int
    local_width: int
    total_width: int


def depth(f: Feature) -> int:
    return f.depth


def _total_width(f: Feature) -> int:
    if isinstance(f, Leaf):
        return 1
    if isinstance(f, Transform):
        return 1 + _total_width(f.child)
    if isinstance(f, Product):
        return len(f.factors) - 1 + sum(_total_width(c) for c in f.factors)
    if isinstance(f, Projection):
        # a covariate entering through a nonzero weight is already counted by that weight
        inner = sum(0 if isinstance(c, Leaf) else _total_width(c) for c in f.children)
        return _local_width(f) + inner
    raise TypeError(type(f))


def _local_width(f: Feature) -> int:
    if isinstance(f, Leaf):
        return 1
    if isinstance(f, (Transform,)):
        return 1
    if isinstance(f, Product):
        return len(f.factors) - 1
    if isinstance(f, Projection):
        return len(f.weights) + (1 if f.intercept != 0 else 0)
    raise TypeError(type(f))


def complexity(f: Feature) -> ComplexityReport:
    """Depth, local width and total width of a feature.

    The total width is the complexity entering the model prior.  A flattened
    product of k factors counts k - 1 multiplications, each of local width 1.
    """
    return ComplexityReport(f.depth, _local_width(f), _total_width(f))


def feature_count(m: int, g_size: int, d: int) -> int:
    """Theoretical number of depth-``d`` features for ``m`` covariates.

    Returns ``COUNT_SATURATED`` once the count no longer fits in 63 bits.
    """
    if m < 1 or g_size < 1 or d < 0:
        raise ValueError("need m >= 1, g_size >= 1, d >= 0")
    counts = [m]
    for k in range(1, d + 1):
        exponent = sum(counts)
        if exponent >= 63:
            return COUNT_SATURATED
        q = g_size * (2**exponent - 1) - sum(counts[1:k])
        if q >= COUNT_SATURATED:
            return COUNT_SATURATED
        counts.append(q)
    return counts[d]


# ---------------------------------------------------------------------------
# evaluation


def _lookup(g: str, transforms: TransformationSet | None):
    if transforms is not None and g in transforms:
        return transforms[g]
    try:
        return BUILTIN[g]
    except KeyError:
        raise KeyError(f"unknown transformation {g!r}") from None


def evaluate(
    f: Feature,
    X: np.ndarray,
    transforms: TransformationSet | None = None,
    cache: dict[str, np.ndarray] | None = None,
) -> np.ndarray:
    """Evaluate ``f`` row-wise on the data matrix ``X``.

    ``cache`` maps canonical keys to already computed columns and is filled
    in as a side effect; it must only be shared between calls on the same
    ``X``.
    """
    if cache is not None:
        hit = cache.get(f.key)
        if hit is not None:
            return hit
    with np.errstate(all="ignore"):
        if isinstance(f, Leaf):
            if f.index >= X.shape[1]:
                raise IndexError(f"covariate x{f.index} out of range for {X.shape[1]} columns")
            out = np.asarray(X[:, f.index], dtype=float)
        elif isinstance(f, Transform):
            out = _lookup(f.g, transforms)(evaluate(f.child, X, transforms, cache))
        elif isinstance(f, Product):
            out = evaluate(f.factors[0], X, transforms, cache)
            for c in f.factors[1:]:
                out = out * evaluate(c, X, transforms, cache)
        elif isinstance(f, Projection):
            lin = np.full(X.shape[0], f.intercept)
            for w, c in zip(f.weights, f.children):
                lin = lin + w * evaluate(c, X, transforms, cache)
            out = _lookup(f.g, transforms)(lin)
        else:
            raise TypeError(type(f))
    out = np.asarray(out, dtype=float)
    if not np.all(np.isfinite(out)):
        raise FeatureEvaluationError(f.key)
    if cache is not None:
        out.setflags(write=False)
        cache[f.key] = out
    return out


# ---------------------------------------------------------------------------
# operators


def _check_depth(f: Feature, d_max: int | None) -> Feature:
    if d_max is not None and f.depth > d_max:
        raise FeatureRejected(f"depth {f.depth} exceeds D_max={d_max}: {f.key}")
    return f


def make_modification(f: Feature, g: str, d_max: int | None = None) -> Feature:
    return _check_depth(Transform(g, f), d_max)


def make_crossover(f1: Feature, f2: Feature, d_max: int | None = None) -> Feature:
    return _check_depth(Product((f1, f2)), d_max)


def make_projection(
    children: Sequence[Feature],
    g: str,
    intercept: float,
    weights: Sequence[float],
    d_max: int | None = None,
) -> Feature:
    if not children:
        raise FeatureRejected("projection needs at least one child")
    if d_max is not None and max(c.depth for c in children) + 1 > d_max:
        raise FeatureRejected("projection would exceed D_max")
    try:
        f = Projection(g, float(intercept), tuple(float(w) for w in weights), tuple(children))
    except ValueError as err:
        raise FeatureRejected(str(err)) from None
    return _check_depth(f, d_max)


# ---------------------------------------------------------------------------
# redundancy


class SpanChecker:
    """Linear dependence tests against a growing set of columns plus a constant.

    Keeps an orthonormal basis (modified Gram-Schmidt with one
    re-orthogonalization pass) so each test and each addition costs O(n k).
    """

    def __init__(self, columns: Sequence[np.ndarray], n: int, tol: float = REDUNDANCY_TOL):
        self.tol = tol
        self.n = n
        self._basis = np.empty((n, max(8, len(columns) + 2)))
        self._basis[:, 0] = 1.0 / math.sqrt(n)
        self._k = 1
        for c in columns:
            self.add(c)

    def _residual(self, column: np.ndarray) -> tuple[np.ndarray, float]:
        norm = float(np.linalg.norm(column))
        if norm == 0.0:
            return np.zeros(self.n), 0.0
        r = np.asarray(column, dtype=float) / norm
        B = self._basis[:, : self._k]
        r = r - B @ (B.T @ r)
        r = r - B @ (B.T @ r)
        return r, float(np.linalg.norm(r))

    def residual_ratio(self, column: np.ndarray) -> float:
        return self._residual(column)[1]

    def is_dependent(self, column: np.ndarray) -> bool:
        return self.residual_ratio(column) < self.tol

    def add(self, column: np.ndarray) -> bool:
        """Append ``column`` to the span; returns False (and adds nothing) if dependent."""
        r, rn = self._residual(column)
        if rn < self.tol:
            return False
        if self._k == self._basis.shape[1]:
            grown = np.empty((self.n, 2 * self._k))
            grown[:, : self._k] = self._basis
            self._basis = grown
        self._basis[:, self._k] = r / rn
        self._k += 1
        return True

    def copy(self) -> "SpanChecker":
        other = SpanChecker.__new__(SpanChecker)
        other.tol, other.n, other._k = self.tol, self.n, self._k
        other._basis = self._basis.copy()
        return other


def is_redundant(
    f: Feature,
    population: Sequence[Feature],
    X: np.ndarray,
    transforms: TransformationSet | None = None,
    cache: dict[str, np.ndarray] | None = None,
    tol: float = REDUNDANCY_TOL,
) -> bool:
    """True if ``f`` duplicates a member of ``population`` or lies in the span
    of the members' columns and the constant column."""
    keys = {p.key for p in population}
    if f.key in keys:
        return True
    cols = [evaluate(p, X, transforms, cache) for p in population]
    col = evaluate(f, X, transforms, cache)
    return SpanChecker(cols, X.shape[0], tol).is_dependent(col)


# ---------------------------------------------------------------------------
# parsing canonical keys

_NUM_RE = re.compile(r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|inf|nan)")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def parse_key(key: str) -> Feature:
    """Rebuild a feature from its canonical key."""
    f, pos = _parse(key, 0)
    if pos != len(key):
        raise ValueError(f"trailing characters in feature key at {pos}: {key!r}")
    return f


def _expect(s: str, pos: int, ch: str) -> int:
    if pos >= len(s) or s[pos] != ch:
        raise ValueError(f"expected {ch!r} at {pos} in {s!r}")
    return pos + 1


def _parse(s: str, pos: int) -> tuple[Feature, int]:
    if s.startswith("*(", pos):
        pos += 2
        factors = []
        while True:
            f, pos = _parse(s, pos)
            factors.append(f)
            if s[pos] == ")":
                return Product(tuple(factors)), pos + 1
            pos = _expect(s, pos, ",")
    if s.startswith("@", pos):
        m = _NAME_RE.match(s, pos + 1)
        if not m:
            raise ValueError(f"bad projection at {pos} in {s!r}")
        g = m.group(0)
        pos = _expect(s, m.end(), "(")
        num = _NUM_RE.match(s, pos)
        intercept = float(num.group(0))
        pos = num.end()
        weights, children = [], []
        while s[pos] == ";":
            num = _NUM_RE.match(s, pos + 1)
            if not num:
                raise ValueError(f"bad weight at {pos} in {s!r}")
            pos = _expect(s, num.end(), "*")
            child, pos = _parse(s, pos)
            weights.append(float(num.group(0)))
            children.append(child)
        pos = _expect(s, pos, ")")
        return Projection(g, intercept, tuple(weights), tuple(children)), pos
    m = _NAME_RE.match(s, pos)
    if not m:
        raise ValueError(f"unexpected character at {pos} in {s!r}")
    name = m.group(0)
    pos = m.end()
    if pos < len(s) and s[pos] == "(":
        child, pos = _parse(s, pos + 1)
        return Transform(name, child), _expect(s, pos, ")")
    if re.fullmatch(r"x\d+", name):
        return Leaf(int(name[1:])), pos
    raise ValueError(f"unknown token {name!r} in {s!r}")


def leaf_indices(features: Mapping[str, Feature] | Sequence[Feature]) -> set[int]:
    items = features.values() if isinstance(features, Mapping) else features
    return {i for f in items for i in f.leaves()}
