import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dbrm import glm, inference
from dbrm.features import Leaf, Product, Transform
from dbrm.inference import (
    PosteriorSummary,
    classification_metrics,
    discovery_metrics,
    fit_models,
    frequency_posteriors,
    merge_runs,
    merge_weights,
    model_average_predict,
    per_effect_power,
    renormalized_posteriors,
    total_variation,
)
from dbrm.scoring import ModelRegistry, ModelScore, ModelScorer

FEATS = ["x0", "x1", "x2", "x3", "x4", "x5"]


def full_registry(log_masses):
    reg = ModelRegistry()
    for mask, lm in enumerate(log_masses):
        key = tuple(f for i, f in enumerate(FEATS) if mask >> i & 1)
        reg.add(key, ModelScore(lm, 0.0), [Leaf(int(f[1:])) for f in key])
    return reg


masses = st.lists(st.floats(-50, 50, allow_nan=False), min_size=64, max_size=64)


class TestRenormalized:
    @given(masses)
    def test_enumeration_reproduced(self, lm):
        reg = full_registry(lm)
        post = renormalized_posteriors(reg).model_posteriors
        for key, score in reg:
            # p_i = 1 / sum_j exp(l_j - l_i)
            oracle = 1.0 / math.fsum(math.exp(l - score.log_mass) for l in lm)
            assert post[key] == pytest.approx(oracle, rel=1e-12, abs=1e-300)

    @given(masses, st.floats(-1e3, 1e3))
    def test_shift_invariance(self, lm, c):
        a = renormalized_posteriors(full_registry(lm))
        b = renormalized_posteriors(full_registry([x + c for x in lm]))
        assert total_variation(a.model_posteriors, b.model_posteriors) < 1e-9
        assert b.log_run_mass - a.log_run_mass == pytest.approx(c, abs=1e-9)

    @given(masses)
    def test_inclusion_sums_to_expected_size(self, lm):
        s = renormalized_posteriors(full_registry(lm))
        assert sum(s.inclusion_probs.values()) == pytest.approx(s.expected_size(), abs=1e-9)
        assert all(0.0 <= p <= 1.0 for p in s.inclusion_probs.values())

    def test_no_underflow_with_very_negative_masses(self):
        s = renormalized_posteriors(full_registry([-1e5 - i for i in range(64)]))
        assert sum(s.model_posteriors.values()) == pytest.approx(1.0)
        assert s.log_run_mass == pytest.approx(-1e5 + math.log(1 / (1 - math.exp(-1))), abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            renormalized_posteriors(ModelRegistry())


class TestFrequency:
    def test_counts(self):
        s = frequency_posteriors({("x0",): 3, (): 1})
        assert s.model_posteriors == {("x0",): 0.75, (): 0.25}
        assert s.inclusion_probs == {"x0": 0.75}

    def test_no_visits(self):
        with pytest.raises(ValueError):
            frequency_posteriors({})


def summary(post, log_mass):
    incl = {}
    for m, p in post.items():
        for f in m:
            incl[f] = incl.get(f, 0.0) + p
    return PosteriorSummary(post, incl, log_mass)


class TestMerge:
    @given(st.lists(st.floats(-700, 700), min_size=1, max_size=10))
    def test_weights_sum_to_one_and_follow_mass(self, ls):
        u = merge_weights([summary({(): 1.0}, l) for l in ls])
        assert u.sum() == pytest.approx(1.0)
        order = np.argsort(ls, kind="stable")
        assert np.all(np.diff(u[order]) >= -1e-15)

    @given(st.lists(st.floats(-700, 700), min_size=2, max_size=10), st.floats(-1e4, 1e4))
    def test_weights_invariant_to_common_shift(self, ls, c):
        a = merge_weights([summary({(): 1.0}, l) for l in ls])
        b = merge_weights([summary({(): 1.0}, l + c) for l in ls])
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_equal_mass_is_average(self):
        s1 = summary({("a",): 1.0}, -10.0)
        s2 = summary({("b",): 0.5, (): 0.5}, -10.0)
        m = merge_runs([s1, s2])
        assert m.model_posteriors == pytest.approx({("a",): 0.5, ("b",): 0.25, (): 0.25})
        assert m.inclusion_probs == pytest.approx({"a": 0.5, "b": 0.25})
        assert m.log_run_mass == pytest.approx(-10.0 + math.log(2))

    def test_ratio_of_masses(self):
        s1 = summary({("a",): 1.0}, math.log(3.0))
        s2 = summary({("b",): 1.0}, 0.0)
        assert merge_runs([s1, s2]).inclusion_probs == pytest.approx({"a": 0.75, "b": 0.25})

    def test_single_run_identity(self):
        s = summary({("a",): 1.0}, 2.0)
        assert merge_runs([s]) is s

    def test_empty(self):
        with pytest.raises(ValueError):
            merge_runs([])


class TestMetrics:
    def test_classification(self):
        m = classification_metrics([1, 0, 1, 1], [1, 0, 0, 1])
        assert (m.acc, m.fpr, m.fnr) == (0.75, 0.5, 0.0)

    def test_absent_class(self):
        m = classification_metrics([1, 1], [1, 1])
        assert m.fpr is None and m.fnr == 0.0

    @pytest.mark.parametrize("yh,yt", [([1], [1, 0]), ([], []), ([2], [1])])
    def test_classification_errors(self, yh, yt):
        with pytest.raises(ValueError):
            classification_metrics(yh, yt)

    def test_discovery(self):
        truth = ["a", {"b1", "b2"}]
        runs = [["a", "b2"], ["a", "z"], []]
        d = discovery_metrics(runs, truth)
        assert d.power == pytest.approx(3 / 6)
        assert d.fp == pytest.approx(1 / 3)
        assert d.fdr == pytest.approx((0 + 0.5 + 0) / 3)
        assert per_effect_power(runs, truth) == pytest.approx([2 / 3, 1 / 3])


class TestPrediction:
    def data(self, rng):
        n = 200
        X = rng.normal(size=(n, 2))
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.5 + 2 * X[:, 0] * X[:, 1])))).astype(float)
        return X, y

    def test_single_model_equals_glm(self, rng):
        X, y = self.data(rng)
        f = Product((Leaf(0), Leaf(1)))
        s = PosteriorSummary({(f.key,): 1.0}, {f.key: 1.0}, 0.0, {f.key: f})
        fits = fit_models(s, X, y, "bernoulli")
        design = np.column_stack([np.ones(len(y)), X[:, 0] * X[:, 1]])
        beta = glm.fit_mle("bernoulli", design, y).coefficients
        scores, labels = model_average_predict(fits, s.features, X, "bernoulli")
        np.testing.assert_allclose(scores, 1 / (1 + np.exp(-design @ beta)))
        np.testing.assert_array_equal(labels, (scores >= 0.5).astype(int))

    def test_retained_models_renormalized(self, rng):
        X, y = self.data(rng)
        f0, f1 = Leaf(0), Transform("sin", Leaf(1))
        post = {("x0",): 0.6, (f1.key,): 0.3999999, (): 1e-7}
        s = PosteriorSummary(post, {}, 0.0, {"x0": f0, f1.key: f1})
        fits = fit_models(s, X, y, "bernoulli")
        assert len(fits) == 2
        assert sum(f.posterior for f in fits) == pytest.approx(1.0)
        scores, _ = model_average_predict(fits, s.features, X, "bernoulli")
        parts = [model_average_predict([type(f)(f.key, 1.0, f.coefficients)], s.features, X, "bernoulli")[0]
                 for f in fits]
        np.testing.assert_allclose(scores, sum(f.posterior * p for f, p in zip(fits, parts)))

    def test_gaussian_has_no_labels(self, rng):
        X = rng.normal(size=(30, 1))
        y = X[:, 0] + rng.normal(size=30)
        s = PosteriorSummary({("x0",): 1.0}, {}, 0.0, {"x0": Leaf(0)})
        _, labels = model_average_predict(fit_models(s, X, y, "gaussian"), s.features, X, "gaussian")
        assert labels is None


class TestReports:
    def test_round_trip(self, rng):
        X = rng.normal(size=(60, 3))
        y = X[:, 0] - X[:, 2] + rng.normal(size=60)
        sc = ModelScorer(X, y, "gaussian", a=math.exp(-2), Q=3)
        for feats in ([], [Leaf(0)], [Leaf(0), Leaf(2)], [Transform("sin", Leaf(1))]):
            sc.score(feats)
        s = renormalized_posteriors(sc.registry)
        fh = io.StringIO()
        inference.write_feature_report(s, fh, ["a", "b", "c"])
        rows = inference.read_feature_report(io.StringIO(fh.getvalue()))
        assert [r["rank"] for r in rows] == list(range(1, len(rows) + 1))
        incl = [r["inclusion"] for r in rows]
        assert incl == sorted(incl, reverse=True)
        assert {r["key"]: r["inclusion"] for r in rows} == s.inclusion_probs
        assert any(r["feature"] == "sin(b)" and r["complexity"] == 2 for r in rows)

        fh = io.StringIO()
        inference.write_model_report(s, sc.registry, fh)
        models = inference.read_model_report(io.StringIO(fh.getvalue()))
        assert {m["features"]: m["posterior"] for m in models} == s.model_posteriors
