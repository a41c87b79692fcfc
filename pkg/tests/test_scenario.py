import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ppe_spectrum.errors import ConfigError, ConstraintViolatedError, InvalidProfileError, MonitoringInfeasibleError
from ppe_spectrum.scenario import (
    Y0,
    Y1,
    ScenarioConfig,
    config_from_dict,
    config_to_dict,
    db_to_linear,
    false_alarm_probability,
    intermediate_it_limit,
    load_config,
    normal_cdf,
    normal_isf,
    normal_sf,
    payoff,
    sample_scenario,
    sample_signal,
    signal_distribution,
)


def two_player(g_cross=2.0, g0=(1.0, 1.0), sigma=math.sqrt(0.1), grid=(0, 2.5, 5, 7.5, 10), **kw):
    return ScenarioConfig(
        power_grids=(grid, grid),
        gain_matrix=np.array([[1.0, g_cross], [g_cross, 1.0]]),
        gain_to_lss=np.array(g0),
        noise=1.0,
        it_limit_pu=10.0,
        error_std=sigma,
        **kw,
    )


def test_db_to_linear():
    assert db_to_linear(0) == 1.0
    assert db_to_linear(10) == pytest.approx(10.0, rel=1e-15)
    assert db_to_linear(3) == pytest.approx(10 ** 0.3, rel=1e-15)


@pytest.mark.parametrize("x", [-30, -8.5, -3, -1, 0, 0.5, 1.28, 4, 8, 20, 37])
def test_normal_tails_match_scipy(x):
    assert normal_sf(x) == pytest.approx(norm.sf(x), rel=1e-12, abs=1e-300)
    assert normal_cdf(x) == pytest.approx(norm.cdf(x), rel=1e-12, abs=1e-300)


@given(st.floats(1e-300, 1 - 1e-12))
def test_normal_isf_inverts_upper_tail(p):
    x = normal_isf(p)
    assert x == pytest.approx(norm.isf(p), rel=1e-10, abs=1e-12)


def test_payoff_examples():
    cfg = two_player()
    assert np.all(payoff([0, 0], cfg) == 0)
    u = payoff([10, 10], cfg)
    assert u == pytest.approx([math.log2(1 + 10 / 21)] * 2, rel=1e-15)
    single = ScenarioConfig(((0, 4.0),), np.eye(1), np.ones(1), 1.0, 10.0, 0.3)
    assert payoff([4.0], single)[0] == pytest.approx(math.log2(5.0))


def test_payoff_rejects_off_grid_power():
    with pytest.raises(InvalidProfileError):
        payoff([3.0, 0.0], two_player())


def test_intermediate_limit_examples():
    assert intermediate_it_limit(two_player(max_false_alarm=0.5)).intermediate_it == 10.0
    model = intermediate_it_limit(two_player())
    assert model.intermediate_it == pytest.approx(10 - math.sqrt(0.1) * norm.isf(0.1), abs=1e-12)
    assert model.intermediate_it == pytest.approx(9.5947, abs=1e-4)
    with pytest.raises(MonitoringInfeasibleError):
        intermediate_it_limit(two_player(sigma=10.0))


def test_false_alarm_at_limits():
    cfg = two_player(g0=(1.0, 1.0), grid=(0, 5, 10))
    model = intermediate_it_limit(cfg)
    # Q(10 / sqrt(0.1)) is about 9e-220: negligible, and still representable
    assert false_alarm_probability([0, 0], model, cfg) == pytest.approx(norm.sf(10 / math.sqrt(0.1)), rel=1e-12)
    assert false_alarm_probability([0, 0], model, cfg) < 1e-200
    # put the aggregate exactly on the intermediate limit
    g = model.intermediate_it / 5.0
    cfg2 = two_player(g0=(g, g), grid=(0, 5, 10))
    model2 = intermediate_it_limit(cfg2)
    assert false_alarm_probability([5, 0], model2, cfg2) == pytest.approx(0.1, abs=1e-10)
    with pytest.raises(ConstraintViolatedError):
        false_alarm_probability([10, 10], model, cfg)
    # on the pu limit itself the error is symmetric
    cfg3 = two_player(g0=(1.0, 1.0), grid=(0, 10), max_false_alarm=0.5)
    m3 = intermediate_it_limit(cfg3)
    assert false_alarm_probability([10, 0], m3) == 0.5


def test_signal_distribution_examples():
    cfg = two_player(g0=(1.0, 1.0))
    model = intermediate_it_limit(cfg)
    r0, r1 = signal_distribution([10, 0], model)
    assert r1 == 0.5 and r0 == 0.5
    g = 9.5947 / 10
    m2 = intermediate_it_limit(two_player(g0=(g, g)))
    assert signal_distribution([10, 0], m2)[0] == pytest.approx(0.1, abs=1e-4)


@settings(max_examples=200)
@given(st.lists(st.sampled_from([0, 2.5, 5, 7.5, 10]), min_size=2, max_size=2),
       st.floats(0.01, 3), st.floats(0.01, 3))
def test_signal_pair_sums_to_one_and_is_monotone(p, g1, g2):
    cfg = two_player(g0=(g1, g2))
    model = intermediate_it_limit(cfg)
    r0, r1 = signal_distribution(p, model)
    assert r0 + r1 == 1.0
    for k in range(2):
        q = list(p)
        q[k] = 10
        assert signal_distribution(q, model)[0] >= r0


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]), st.floats(0.1, 8))
def test_payoff_properties(seed, n, beta):
    cfg = sample_scenario(n, beta, seed)
    grids = cfg.power_grids
    rng = np.random.default_rng(seed)
    p = np.array([rng.choice(g) for g in grids])
    u = payoff(p, cfg)
    assert np.all((u == 0) == (p == 0))
    for i in range(n):
        for j in range(n):
            if i != j:
                q = p.copy()
                q[j] = grids[j][-1]
                assert payoff(q, cfg)[i] <= u[i] + 1e-15


def test_sample_signal_noiseless_and_frequency():
    cfg = two_player(g0=(1.0, 1.0), sigma=1e-9, max_false_alarm=0.4)
    model = intermediate_it_limit(cfg)
    rng = np.random.default_rng(0)
    assert all(sample_signal([5, 0], model, rng) == Y1 for _ in range(200))
    assert all(sample_signal([10, 10], model, rng) == Y0 for _ in range(200))

    cfg = two_player(g0=(1.0, 0.95))
    model = intermediate_it_limit(cfg)
    p = [5, 5]
    rng = np.random.default_rng(1)
    eps = rng.normal(0, model.error_std, 1_000_000)
    freq = np.mean(model.interference(p) + eps > model.it_limit_pu)
    assert abs(freq - signal_distribution(p, model)[0]) < 5e-3
    rng = np.random.default_rng(2)
    draws = [sample_signal(p, model, rng) for _ in range(20_000)]
    r0 = signal_distribution(p, model)[0]
    assert abs(np.mean(np.array(draws) == Y0) - r0) < 3 * math.sqrt(r0 * (1 - r0) / 20_000) + 1e-9


def test_sample_scenario_deterministic_and_defaults():
    a, b = sample_scenario(3, 2.0, 42), sample_scenario(3, 2.0, 42)
    assert config_to_dict(a) == config_to_dict(b)
    assert a.noise.tolist() == [1.0] * 3
    assert a.max_powers == (10.0,) * 3
    assert a.it_limit_pu == 10.0
    assert a.error_std ** 2 == pytest.approx(0.1)
    assert a.max_false_alarm == 0.1
    assert a.welfare_weights.tolist() == pytest.approx([1 / 3] * 3)
    assert a.power_grids[0] == (0.0, 2.5, 5.0, 7.5, 10.0)


def test_sample_scenario_cross_gain_mean():
    cross = []
    for s in range(2000):
        g = sample_scenario(8, 2.0, s).gain_matrix
        cross.extend(g[~np.eye(8, dtype=bool)])
    cross = np.array(cross[:100_000])
    assert len(cross) == 100_000
    assert abs(cross.mean() - 2.0) < 0.05


def test_sample_scenario_matched_across_beta():
    a, b = sample_scenario(3, 1.0, 5), sample_scenario(3, 4.0, 5)
    off = ~np.eye(3, dtype=bool)
    assert np.allclose(b.gain_matrix[off], 4 * a.gain_matrix[off])
    assert np.array_equal(np.diag(a.gain_matrix), np.diag(b.gain_matrix))
    assert np.array_equal(a.gain_to_lss, b.gain_to_lss)


def test_config_is_immutable():
    cfg = two_player()
    with pytest.raises(ValueError):
        cfg.gain_matrix[0, 0] = 5.0
    with pytest.raises(AttributeError):
        cfg.discount = 0.5


@pytest.mark.parametrize("bad", [
    {"power_grids": [[1, 2], [0, 1]]},
    {"power_grids": [[0, 2, 1], [0, 1]]},
    {"welfare_weights": [0.7, 0.7]},
    {"max_false_alarm": 1.0},
    {"discount": 1.0},
    {"error_std": 0.0},
])
def test_config_validation(bad):
    d = config_to_dict(two_player())
    d.update(bad)
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_config_roundtrip_and_db_keys(tmp_path):
    cfg = two_player()
    d = config_to_dict(cfg)
    assert config_to_dict(config_from_dict(d)) == d

    d = {
        "n_players": 2, "max_power_db": 10, "levels": 3,
        "gain_matrix": [[1, 2], [2, 1]], "gain_to_lss": [1, 1],
        "noise_db": 0, "it_limit_pu_db": 10, "error_var": 0.1,
    }
    cfg = config_from_dict(d)
    assert cfg.power_grids == ((0.0, 5.0, 10.0),) * 2
    assert cfg.it_limit_pu == pytest.approx(10.0)
    assert cfg.noise.tolist() == [1.0, 1.0]

    path = tmp_path / "c.json"
    path.write_text(json.dumps({"sample": {"n_players": 2, "beta": 2, "seed": 1}}))
    assert config_to_dict(load_config(path)) == config_to_dict(sample_scenario(2, 2, 1))


def test_config_missing_field_named(tmp_path):
    d = config_to_dict(two_player())
    del d["it_limit_pu"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="it_limit_pu"):
        load_config(path)
    path.write_text('{"n_players": 2,\n "gain_matrix": [1, }')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(path)
