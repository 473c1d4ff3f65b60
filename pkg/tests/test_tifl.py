import dataclasses
import json

import numpy as np
import pytest
from conftest import NON_MONOTONE, custom_config, linear_config, random_small_config
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_coopt import errmodel, oracle
from aoi_coopt.baselines import BaselineSpec
from aoi_coopt.core import SourceConfig, TransmissionModel
from aoi_coopt.sim import simulate_single
from aoi_coopt.tifl import TiflPolicy, cycle_stats, solve_beta, solve_tifl, tifl_decide


def constant_config(c=1.3, B=3, alpha=0.7, delta_bound=10):
    return SourceConfig(errmodel.synthetic_table("constant", B, delta_bound, c), TransmissionModel.det(alpha, B))


def test_cycle_stats_constant():
    cfg = constant_config()
    for l in (1, 2, 3):
        cost, length = cycle_stats(1.0, 0, l, cfg)
        ET = cfg.trans.mean(l)
        assert (cost, length) == pytest.approx((1.3 * ET, ET))


def test_cycle_stats_linear():
    assert cycle_stats(1.0, 0, 1, linear_config()) == (1.0, 1.0)
    assert cycle_stats(2.5, 0, 1, linear_config(T=2)) == (5.0, 2.0)


def test_solve_beta_examples():
    assert solve_beta(0, 2, constant_config()) == pytest.approx(1.3, rel=1e-12)
    assert solve_beta(0, 1, linear_config()) == 1.0
    assert solve_beta(0, 1, linear_config(T=2)) == 2.5


def test_solve_tifl_constant_tie_break():
    pol = solve_tifl(constant_config())
    assert (pol.l_star, pol.b_star) == (1, 0)
    assert pol.beta_star == pytest.approx(1.3, rel=1e-12)


def test_solve_tifl_beats_zero_wait(jakes10):
    cfg = SourceConfig(jakes10.truncate(5), TransmissionModel.det(0.2, 5))
    pol = solve_tifl(cfg)
    zw = simulate_single(BaselineSpec("zero_wait", 1), cfg, 50_000).time_avg_error
    assert pol.beta_star <= zw


def test_tifl_decide_examples():
    c = solve_tifl(constant_config())
    assert all(tifl_decide(x, c) for x in range(0, 12))
    lin = solve_tifl(linear_config())
    assert tifl_decide(1, lin)
    cfg = custom_config(NON_MONOTONE)
    pol = dataclasses.replace(solve_tifl(cfg), beta_star=3.5)
    assert pol.gamma(1, 0, 1) == pytest.approx(3.0)
    assert not tifl_decide(0, pol)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_f_non_increasing_in_beta(seed):
    cfg = random_small_config(np.random.default_rng(seed), B_max=2, delta_bound=10,
                              deterministic=bool(seed % 2))
    grid = np.linspace(cfg.table.min - 0.5, cfg.table.max + 0.5, 25)
    for l in range(1, cfg.B + 1):
        for b in range(0, cfg.B - l + 1):
            f = [c - beta * n for beta in grid for c, n in [cycle_stats(beta, b, l, cfg)]]
            assert np.all(np.diff(f) <= 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_root_is_policy_average(seed):
    # beta is a fixed point: the threshold-beta policy has average exactly beta
    cfg = random_small_config(np.random.default_rng(seed), B_max=3, delta_bound=12, deterministic=bool(seed % 2))
    pol = solve_tifl(cfg)
    for l in range(1, cfg.B + 1):
        for b in range(0, cfg.B - l + 1):
            beta = pol.beta_grid[b, l]
            c, n = cycle_stats(beta, b, l, cfg)
            assert c / n == pytest.approx(beta, rel=1e-9, abs=1e-12)
    assert pol.beta_star == np.nanmin(pol.beta_grid) or pol.beta_star <= np.nanmin(pol.beta_grid) * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_length_matches_oracle(seed):
    # with B = 1 the time-invariant class is the whole policy class
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 1, (9, 1))
    cfg = SourceConfig(errmodel.InferenceErrorTable(v), TransmissionModel.det(float(rng.choice([1.0, 2.0, 3.0])), 1))
    assert solve_tifl(cfg).beta_star == pytest.approx(oracle.exhaustive_single_source(cfg), rel=1e-9)


def test_json_roundtrip(jakes10):
    cfg = SourceConfig(jakes10.truncate(4), TransmissionModel.det(0.5, 4))
    pol = solve_tifl(cfg)
    back = TiflPolicy.from_json(json.loads(pol.dumps()), cfg)
    assert (back.l_star, back.b_star, back.beta_star) == (pol.l_star, pol.b_star, pol.beta_star)
    assert np.array_equal(back.waits, pol.waits)
    assert np.array_equal(np.isnan(back.beta_grid), np.isnan(pol.beta_grid))
    other = SourceConfig(jakes10.truncate(3), TransmissionModel.det(0.5, 3))
    with pytest.raises(ValueError):
        TiflPolicy.from_json(json.loads(pol.dumps()), other)
