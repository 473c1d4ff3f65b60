import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_coopt import errmodel, oracle
from aoi_coopt.multi import (MultiConfig, MultiPolicy, SourceValueTables, best_position, dual_ascent,
                             knapsack_select, lower_bound_eval, net_gain, net_gain_policy_step, policy_at,
                             rvi_residual, rvi_source, three_type_config)


def min_mean_cycle(table, lam):
    """Optimal average of the priced per-slot source MDP by Karp's minimum mean cycle.

    States ``(delta, d)``; idling ages the state, sending ``(l, b)`` lands on ``(1 + b, l)`` and
    costs ``lam * l`` on top of ``err(delta, d)``. Every state is reachable, so the optimal
    average is the minimum cycle mean of the whole graph.
    """
    B, db = table.B, table.delta_bound
    states = [(x, d) for x in range(1, db + 1) for d in range(1, B + 1)]
    idx = {s: i for i, s in enumerate(states)}
    edges = []
    for (x, d), i in idx.items():
        c = table.lookup(x, d)
        edges.append((i, idx[(min(x + 1, db), d)], c))
        for l in range(1, B + 1):
            for b in range(0, B - l + 1):
                edges.append((i, idx[(1 + b, l)], c + lam * l))
    n = len(states)
    D = np.full((n + 1, n), np.inf)
    D[0, :] = 0.0
    for k in range(1, n + 1):
        for u, v, w in edges:
            if D[k - 1, u] + w < D[k, v]:
                D[k, v] = D[k - 1, u] + w
    best = np.inf
    for v in range(n):
        if np.isfinite(D[n, v]):
            best = min(best, max((D[n, v] - D[k, v]) / (n - k) for k in range(n) if np.isfinite(D[k, v])))
    return best


def small_table(rng, B, db=8):
    return errmodel.InferenceErrorTable(rng.uniform(0, 1, (db + 1, B)))


def test_rvi_constant_table():
    t = errmodel.synthetic_table("constant", 3, 8, 0.4)
    s = rvi_source(t, 0.0)
    assert s.p_bar == pytest.approx(0.4, abs=1e-12)
    assert np.allclose(s.h, 0, atol=1e-10)
    s = rvi_source(t, 0.2)
    assert s.p_bar == pytest.approx(0.4, abs=1e-9)
    assert np.all(s.relaxed_lengths()[1:, 1:] == 0)


def test_rvi_two_level_table():
    v = np.where(np.arange(11) <= 3, 0.1, 2.0)[:, None]
    t = errmodel.InferenceErrorTable(v)
    s = rvi_source(t, 0.0)
    assert s.p_bar == pytest.approx(min_mean_cycle(t, 0.0), abs=1e-6)
    assert s.relaxed_lengths()[4, 1] == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.05, 0.3]))
def test_rvi_matches_min_mean_cycle(seed, lam):
    rng = np.random.default_rng(seed)
    t = small_table(rng, int(rng.integers(1, 4)))
    s = rvi_source(t, lam)
    assert s.p_bar == pytest.approx(min_mean_cycle(t, lam), abs=1e-6)
    assert rvi_residual(s) <= 1e-7


def test_best_position():
    h = np.zeros((9, 6))
    assert best_position(h, 2) == 0
    h[:, 1] = np.arange(9)
    assert best_position(h, 1) == 0
    h[1:, 1] = [5, 4, 1, 2, 3, 6, 7, 8]  # minimum at delta = 3
    assert best_position(h, 1) == 2
    with pytest.raises(ValueError):
        best_position(h, 6)


def test_net_gain_identities():
    rng = np.random.default_rng(1)
    t = small_table(rng, 3)
    s = rvi_source(t, 0.1)
    assert net_gain(s, 0.1, 4, 2, 0) == 0.0
    for x in range(1, 9):
        for d in range(1, 4):
            for l in range(1, 4):
                a1, a2 = net_gain(s, 0.1, x, d, l), net_gain(s, 0.35, x, d, l)
                assert a2 == pytest.approx(a1 - 0.25 * l, abs=1e-15)
                assert a1 == pytest.approx(s.alpha()[x, d, l], abs=1e-15)
    flat = SourceValueTables(t, 0.2, np.zeros((9, 4)), 0.0, np.zeros(4, dtype=np.int64))
    assert net_gain(flat, 0.2, 3, 1, 2) == pytest.approx(-0.4)
    assert np.all(s.alpha()[:, :, 0] == 0)


def test_knapsack_examples():
    assert knapsack_select([[0, 5, 7, 8], [0, 4, 6, 9]], 3) == ((1, 2), 11.0)
    assert knapsack_select([[0, 1, 3, 3]], 5) == ((2,), 3.0)
    assert knapsack_select([[0, -1, -2], [0, -0.5]], 4) == ((0, 0), 0.0)
    assert oracle.exhaustive_knapsack([[0, 5, 7, 8], [0, 4, 6, 9]], 3) == ((1, 2), 11.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.integers(-3, 6), min_size=1, max_size=4), min_size=1, max_size=4),
       st.integers(0, 6))
def test_knapsack_matches_enumeration(raw, N):
    gains = [[0.0] + [float(x) for x in g] for g in raw]
    lens, value = knapsack_select(gains, N)
    assert (lens, value) == oracle.exhaustive_knapsack(gains, N)
    assert sum(lens) <= N


def test_dual_slack_channels_keep_price_zero():
    rng = np.random.default_rng(2)
    cfg = MultiConfig(N=6, tables=[small_table(rng, 2), small_table(rng, 3)])
    pol = dual_ascent(cfg, max_iter=2000, min_iter=500)
    assert pol.lam == 0.0
    assert all(h == 0.0 for h in pol.history)


def test_dual_no_channels_prices_out_sending():
    t = errmodel.jakes_error_table(errmodel.JakesParams.from_velocity(15, 2e9), 1, 10)
    cfg = MultiConfig(N=0, tables=[t])
    pol = dual_ascent(cfg, beta=1.0, min_iter=200)
    s = pol.sources[0]
    assert pol.lam >= s.base_gain()[1:, 1:, 1:].max() - 1e-9
    assert np.all(s.relaxed_lengths()[1:, 1:] == 0)


def test_three_type_price_positive():
    cfg = three_type_config(1, B=3, delta_bound=10, N=4)
    assert (cfg.M, cfg.N, cfg.B) == (3, 4, (3, 3, 3))
    pol = dual_ascent(cfg)
    assert 0 < pol.lam < np.inf
    assert pol.dual_bound() <= sum(s.p_bar for s in pol.sources)


def test_net_gain_step_symmetric_and_slack():
    t = errmodel.InferenceErrorTable(np.linspace(0.1, 2, 9)[:, None] * np.ones((1, 2)))
    cfg = MultiConfig(N=1, tables=[t, t, t])
    pol = policy_at(cfg, 0.0)
    l, b = net_gain_policy_step(cfg, pol, [5, 5, 5], [1, 1, 1])
    # one channel, three equal claims: the lexicographically smallest length vector wins
    assert l.tolist() == [0, 0, 1] and b.tolist() == [0, 0, 0]
    cfg2 = MultiConfig(N=6, tables=[t, t, t])
    pol2 = policy_at(cfg2, 0.0)
    delta, d = np.array([5, 2, 8]), np.array([1, 2, 1])
    l, _ = net_gain_policy_step(cfg2, pol2, delta, d)
    own = [pol2.sources[j].relaxed_lengths()[delta[j], d[j]] for j in range(3)]
    assert l.tolist() == own


def test_lower_bound_examples():
    c1 = errmodel.synthetic_table("constant", 2, 6, 0.3)
    c2 = errmodel.synthetic_table("constant", 1, 6, 0.5)
    cfg = MultiConfig(N=1, tables=[c1, c2])
    assert lower_bound_eval(cfg, policy_at(cfg, 0.1), 2000) == pytest.approx(0.8, abs=1e-12)
    rng = np.random.default_rng(4)
    tabs = [small_table(rng, 2), small_table(rng, 1)]
    cfg = MultiConfig(N=10, tables=tabs)
    pol = dual_ascent(cfg, max_iter=1000)
    assert pol.lam == 0.0
    expected = sum(min_mean_cycle(t, 0.0) for t in tabs)
    assert lower_bound_eval(cfg, pol, 50_000) == pytest.approx(expected, abs=1e-3)


def test_policy_json_roundtrip():
    cfg = three_type_config(1, B=2, delta_bound=8, N=3)
    pol = policy_at(cfg, 0.01)
    back = MultiPolicy.from_json(json.loads(pol.dumps()), cfg)
    assert back.lam == pol.lam
    for a, b in zip(back.sources, pol.sources):
        assert np.array_equal(a.h, b.h) and np.array_equal(a.b_hat, b.b_hat) and a.p_bar == b.p_bar
    with pytest.raises(ValueError):
        MultiPolicy.from_json(json.loads(pol.dumps()), three_type_config(2, B=2, delta_bound=8))


def test_config_from_json(tmp_path):
    t = errmodel.synthetic_table("linear", 3, 8, 0.1)
    errmodel.save_csv(t, tmp_path / "a.csv")
    spec = {"N": 2, "sources": [{"table": "a.csv"}, {"table": "a.csv", "B": 2}], "dual": {"beta": 0.01}}
    (tmp_path / "m.json").write_text(json.dumps(spec))
    cfg = MultiConfig.from_json(tmp_path / "m.json")
    assert cfg.B == (3, 2) and cfg.dual.beta == 0.01
    spec["sources"][0]["delta_bound"] = 9
    (tmp_path / "m.json").write_text(json.dumps(spec))
    with pytest.raises(ValueError):
        MultiConfig.from_json(tmp_path / "m.json")
