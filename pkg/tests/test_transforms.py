import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbrm.transforms import BUILTIN, PRESETS, Transformation, TransformationSet


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_builtins_are_total(x):
    for name, g in BUILTIN.items():
        assert np.isfinite(g(np.array([x]))).all(), name


def test_values():
    assert BUILTIN["gauss"](np.array([0.0]))[0] == 1.0
    assert BUILTIN["troot"](np.array([-8.0]))[0] == pytest.approx(2.0)
    assert BUILTIN["log"](np.array([-(np.e - 1)]))[0] == pytest.approx(1.0)
    assert BUILTIN["pow2_3"](np.array([-2.0]))[0] == pytest.approx(2.0**2.3)
    assert BUILTIN["sigmoid"](np.array([0.0]))[0] == 0.5


def test_presets_resolve():
    for name, names in PRESETS.items():
        assert TransformationSet.preset(name).names == list(names)


def test_unknown_and_duplicate():
    with pytest.raises(KeyError):
        TransformationSet.from_names(["nope"])
    with pytest.raises(KeyError):
        TransformationSet.preset("nope")
    with pytest.raises(ValueError):
        TransformationSet([Transformation("a", np.sin), Transformation("a", np.cos)])
    with pytest.raises(ValueError):
        TransformationSet([Transformation("bad name", np.sin)])
