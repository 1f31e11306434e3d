import numpy as np
import pytest
from hypothesis import strategies as st

from dbrm.features import Leaf, Product, Projection, Transform

G_NAMES = ("sin", "tanh", "atan", "sigmoid", "troot", "gauss")


def features(max_leaves: int = 5):
    """Hypothesis strategy over small feature trees."""
    leaf = st.builds(Leaf, st.integers(0, max_leaves - 1))
    weight = st.floats(-5, 5, allow_nan=False).filter(lambda w: abs(w) > 1e-3)

    def extend(children):
        transform = st.builds(Transform, st.sampled_from(G_NAMES), children)
        product = st.lists(children, min_size=2, max_size=3).map(lambda fs: Product(tuple(fs)))
        proj = st.lists(children, min_size=1, max_size=3, unique_by=lambda f: f.key).flatmap(
            lambda cs: st.builds(
                lambda g, a0, ws: Projection(g, a0, tuple(ws), tuple(cs)),
                st.sampled_from(G_NAMES),
                st.floats(-3, 3, allow_nan=False),
                st.lists(weight, min_size=len(cs), max_size=len(cs)),
            )
        )
        return st.one_of(transform, product, proj)

    return st.recursive(leaf, extend, max_leaves=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record one PASS/FAIL line per acceptance criterion and echo it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def report(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        lines[criterion] = line
        print(line, flush=True)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
