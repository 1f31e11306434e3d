import math

import pytest

from dbrm import experiments
from dbrm.data_io import DataError, simulate_combinatorial
from dbrm.features import parse_key


def test_presets_are_valid():
    for name, proto in experiments.protocols().items():
        proto.config.gmjmcmc_config()
        assert name in experiments.EXPERIMENTS


def test_simstudy_truth_keys():
    proto = experiments.protocols()["simstudy"]
    truth = proto.truth(simulate_combinatorial(0))
    keys = [next(iter(g)) for g in truth]
    assert keys[:3] == ["x6", "x7", "*(x17,x20)"]
    assert parse_key(keys[-1]).leaves() == [10, 12, 18, 49]
    assert proto.truth_labels[4] == "X12*X20*X37"


def test_simstudy_prior():
    assert experiments.protocols()["simstudy"].config.a == pytest.approx(1000.0**-2)


@pytest.mark.parametrize("name,env", [("spam", "DBRM_SPAM_CSV"), ("asteroid", "DBRM_NEO_CSV"),
                                      ("mass", "DBRM_EXOPLANET_CSV")])
def test_unbundled_data_points_to_override(name, env, monkeypatch):
    monkeypatch.delenv(env, raising=False)
    with pytest.raises(DataError, match=env):
        experiments.run_experiment(name, 1)


def test_seeds_per_chain_and_replication():
    proto = experiments.protocols()["simstudy"]
    small = proto.config.with_updates(threads=2, T_max=2, N_init=20, N_expl=20, N_final=20)
    ds = simulate_combinatorial(0, n=200)
    a = experiments.fit(ds.X, ds.y, small, seed=7)
    b = experiments.fit(ds.X, ds.y, small, seed=7)
    assert [list(c.registry.scores) for c in a.chains] == [list(c.registry.scores) for c in b.chains]
    single = experiments.run_chain(ds.X, ds.y, small, 8)
    assert list(single.registry.scores) == list(a.chains[1].registry.scores)


def test_chain_failure_wrapped(monkeypatch):
    def boom(*args, **kw):
        raise FloatingPointError("bad")

    monkeypatch.setattr(experiments, "run_chain", boom)
    ds = simulate_combinatorial(0, n=50)
    with pytest.raises(experiments.ChainFailure, match="chain 0"):
        experiments.fit(ds.X, ds.y, experiments.protocols()["simstudy"].config)


def test_small_discovery_replication():
    res = experiments.run_experiment("simstudy", 1, dict(threads=1, T_max=3, N_init=50, N_expl=50, N_final=100))
    d = res.discovery()
    assert 0.0 <= d.power <= 1.0 and 0.0 <= d.fdr <= 1.0
    assert "Power" in res.format_table()


def test_breast_replication_table():
    res = experiments.run_experiment("breast", 1, dict(threads=1, T_max=2, N_init=30, N_expl=30, N_final=30,
                                                         D_max=2))
    acc = res.classification_table()["acc"][0]
    assert 0.8 < acc <= 1.0
    assert math.isfinite(acc) and "ACC" in res.format_table()
