import json

import numpy as np
import pytest
from conftest import linear_config, random_small_config
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_coopt import errmodel, oracle
from aoi_coopt.core import SourceConfig, SystemState, TransmissionModel
from aoi_coopt.index import GammaTable
from aoi_coopt.tifl import solve_tifl
from aoi_coopt.tvfl import (NotConverged, PolicyMaps, SmdpModel, TvflPolicy, _class_gain, bellman_residual,
                            closed_classes, initial_maps, policy_evaluate, policy_improve, solve_tvfl,
                            tvfl_decide)


def constant_config(c=0.8, B=3):
    return SourceConfig(errmodel.synthetic_table("constant", B, 10, c), TransmissionModel.det(0.6, B))


def fixed_maps(cfg, Z=0, l=1, b=0):
    m = initial_maps(cfg)
    m.Z[:] = Z
    m.l[:] = l
    m.b[:] = b
    return m


@pytest.mark.parametrize("method", ["direct", "sweep"])
def test_evaluate_examples(method):
    cfg = constant_config()
    p, h = policy_evaluate(fixed_maps(cfg, Z=2, l=2, b=1), cfg, method=method)
    assert p == pytest.approx(0.8, rel=1e-9)
    assert np.allclose(h, 0, atol=1e-8)
    lin = linear_config(B=1, delta_bound=12)
    assert policy_evaluate(fixed_maps(lin), lin, method=method)[0] == pytest.approx(1.0, abs=1e-9)
    assert policy_evaluate(fixed_maps(lin, Z=1), lin, method=method)[0] == pytest.approx(1.5, abs=1e-9)


def test_improve_constant_keeps_average():
    cfg = constant_config()
    maps = fixed_maps(cfg, Z=1, l=3)
    p, h = policy_evaluate(maps, cfg)
    new = policy_improve(h, p, cfg, current=maps)
    assert policy_evaluate(new, cfg)[0] == pytest.approx(0.8, rel=1e-12)


def test_improve_prefers_short_features_when_length_is_useless():
    B, db = 3, 20
    col = np.linspace(0.1, 3.0, db + 1)
    table = errmodel.InferenceErrorTable(np.repeat(col[:, None], B, axis=1))
    cfg = SourceConfig(table, TransmissionModel([([l], [1.0]) for l in range(1, B + 1)]))
    maps = fixed_maps(cfg, l=B)
    p, h = policy_evaluate(maps, cfg)
    new = policy_improve(h, p, cfg)
    assert np.all(new.l[1:, 1:] == 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_improvement_never_hurts(seed):
    rng = np.random.default_rng(seed)
    cfg = random_small_config(rng, B_max=3, delta_bound=12, deterministic=bool(seed % 2))
    model = SmdpModel(cfg)
    # one (l, b) everywhere keeps the starting chain unichain; waits vary by state
    l = int(rng.integers(1, cfg.B + 1))
    maps = fixed_maps(cfg, l=l, b=int(rng.integers(0, cfg.B - l + 1)))
    room = (cfg.delta_bound - np.arange(cfg.delta_bound + 1))[:, None]
    maps.Z[:] = np.minimum(rng.integers(0, 3, maps.Z.shape), room)
    p, h = policy_evaluate(maps, cfg, model)
    new = policy_improve(h, p, cfg, model, current=maps)
    # the improved policy may split into several recurrent classes; none may do worse
    c, tau, P = model.stage(new)
    for members in closed_classes(P):
        assert _class_gain(model.flat(c), model.flat(tau), P, members) <= p + 1e-9


def test_solve_constant():
    assert solve_tvfl(constant_config()).p_bar == pytest.approx(0.8, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_solver_properties(seed):
    cfg = random_small_config(np.random.default_rng(seed), B_max=3, delta_bound=12, deterministic=bool(seed % 2))
    pol = solve_tvfl(cfg)
    assert pol.p_bar <= solve_tifl(cfg).beta_star + 1e-9
    assert np.all(np.diff(pol.history) <= 1e-9)
    assert bellman_residual(pol.h, pol.p_bar, cfg) <= 1e-9 * max(1.0, np.abs(pol.h).max())
    assert pol.p_bar == pytest.approx(policy_evaluate(pol.maps(), cfg)[0], rel=1e-12, abs=1e-15)


def test_multichain_policy_rejected():
    # two self-contained length classes: (1, 0) lands on d = 1 and (2, 0) on d = 2
    cfg = SourceConfig(errmodel.synthetic_table("linear", 2, 10, 1.0), TransmissionModel.det(1.0, 2))
    maps = initial_maps(cfg)
    maps.l[:, 2] = 2
    with pytest.raises(ValueError, match="recurrent classes"):
        policy_evaluate(maps, cfg)


def test_sweep_agrees_with_direct_on_aperiodic_chain():
    cfg = SourceConfig(errmodel.synthetic_table("linear", 2, 12, 0.5),
                       TransmissionModel([([1, 2], [0.5, 0.5]), ([1, 3], [0.3, 0.7])]))
    maps = initial_maps(cfg)
    maps.Z[1:4, :] = 1
    p1, h1 = policy_evaluate(maps, cfg, method="direct")
    p2, h2 = policy_evaluate(maps, cfg, method="sweep", tol=1e-12)
    assert p1 == pytest.approx(p2, rel=1e-9)
    assert np.allclose(h1, h2, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_joint_value_iteration(seed):
    cfg = random_small_config(np.random.default_rng(seed), B_max=2, delta_bound=8, deterministic=bool(seed % 2))
    g, lo, hi = oracle.joint_value_iteration(cfg)
    pol = solve_tvfl(cfg)
    assert pol.p_bar == pytest.approx(g, rel=1e-9, abs=1e-12)


def test_tiny_instance_matches_exhaustive():
    rng = np.random.default_rng(5)
    v = rng.uniform(0, 2, (9, 2))
    cfg = SourceConfig(errmodel.InferenceErrorTable(v), TransmissionModel.det(1.0, 2))
    assert solve_tvfl(cfg).p_bar == pytest.approx(oracle.exhaustive_single_source(cfg), rel=1e-6)


def test_decide_examples(jakes10):
    c = solve_tvfl(constant_config())
    assert np.all(c.Z[1:, 1:] == 0)
    cfg = SourceConfig(jakes10.truncate(5), TransmissionModel.det(0.2, 5))
    pol = solve_tvfl(cfg)
    assert tvfl_decide(SystemState(500, 2), pol) == tvfl_decide(SystemState(50, 2), pol)
    g = GammaTable(cfg.table, cfg.trans)
    for delta in range(1, 51):
        for d in range(1, 6):
            a = tvfl_decide(SystemState(delta, d), pol)
            assert g(a.l, delta + a.Z, d) >= pol.p_bar * (1 - 1e-12)
            if a.Z >= 1:
                assert g(a.l, delta + a.Z - 1, d) < pol.p_bar


def test_json_roundtrip(jakes10):
    cfg = SourceConfig(jakes10.truncate(4), TransmissionModel.det(0.5, 4))
    pol = solve_tvfl(cfg)
    back = TvflPolicy.from_json(json.loads(pol.dumps()))
    assert back.p_bar == pol.p_bar
    for a, b in ((back.Z, pol.Z), (back.l, pol.l), (back.b, pol.b), (back.h, pol.h)):
        assert np.array_equal(a[1:, 1:], b[1:, 1:])


def test_round_limit_raises(jakes10):
    cfg = SourceConfig(jakes10.truncate(4), TransmissionModel.det(0.5, 4))
    with pytest.raises(NotConverged):
        solve_tvfl(cfg, max_rounds=1)


def test_policy_maps_equality():
    cfg = constant_config()
    a = initial_maps(cfg)
    b = a.copy()
    assert a.same(b)
    b.Z[3, 1] = 2
    assert not a.same(b)
    assert isinstance(a, PolicyMaps)
