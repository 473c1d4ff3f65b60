import io
from contextlib import redirect_stdout

import numpy as np
import pytest
from conftest import linear_config, random_small_config
from hypothesis import given, settings
from hypothesis import strategies as st

from aoi_coopt import errmodel
from aoi_coopt.baselines import BaselineSpec
from aoi_coopt.core import Action, SourceConfig, TransmissionModel
from aoi_coopt.multi import MultiConfig, policy_at
from aoi_coopt.sim import (RESULT_COLUMNS, SplitMix64, batch_se, replay_aoi,
                           simulate_multi, simulate_single, write_results)
from aoi_coopt.tifl import solve_tifl
from aoi_coopt.tvfl import solve_tvfl


def test_splitmix_reference_values():
    assert int(SplitMix64(0).u64(1)[0]) == 16294208416658607535
    u = SplitMix64(123).uniforms(10_000)
    assert np.all((u >= 0) & (u < 1))
    assert np.array_equal(SplitMix64(5).uniforms(4, start=3), SplitMix64(5).uniforms(6)[2:])


def test_linear_unit_time_is_exact():
    cfg = linear_config(delta_bound=12)
    assert simulate_single(BaselineSpec("zero_wait", 1), cfg, 1_000_000).time_avg_error == 1.0
    pol = solve_tifl(cfg)
    assert pol.beta_star == 1.0
    assert simulate_single(pol, cfg, 1_000_000).time_avg_error == 1.0


def test_constant_table_any_policy():
    cfg = SourceConfig(errmodel.synthetic_table("constant", 3, 12, 0.25),
                       TransmissionModel([([1, 2], [0.5, 0.5]), ([2], [1.0]), ([1, 4], [0.9, 0.1])]))
    for pol in (solve_tifl(cfg), solve_tvfl(cfg), BaselineSpec("zero_wait", 3), BaselineSpec("periodic", 2, 5),
                lambda delta, d: Action(2, 1, 1)):
        assert simulate_single(pol, cfg, 20_000, seed=3).time_avg_error == 0.25


def test_periodic_examples():
    cfg = linear_config(delta_bound=40)
    assert simulate_single(BaselineSpec("periodic", 1, 1), cfg, 100_000).time_avg_error == 1.0
    assert simulate_single(BaselineSpec("periodic", 1, 2), cfg, 100_000).time_avg_error == 1.5
    slow = linear_config(T=3, delta_bound=40)
    res = simulate_single(BaselineSpec("periodic", 1, 2), slow, 200_000)
    assert res.time_avg_error == pytest.approx(40.0, rel=1e-2)


def test_periodic_backlog_grows_with_rate():
    cfg = SourceConfig(errmodel.synthetic_table("linear", 1, 30, 1.0), TransmissionModel.constant(3, 1))
    backlog = [simulate_single(BaselineSpec("periodic", 1, tp), cfg, 30_000).mean_backlog for tp in (8, 5, 4, 3, 2)]
    assert np.all(np.diff(backlog) >= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["tifl", "tvfl", "zero", "periodic", "callable"]))
def test_event_log_replays_aoi(seed, kind):
    rng = np.random.default_rng(seed)
    cfg = random_small_config(rng, B_max=3, delta_bound=12, deterministic=bool(seed % 2))
    pol = {"tifl": lambda: solve_tifl(cfg), "tvfl": lambda: solve_tvfl(cfg),
           "zero": lambda: BaselineSpec("zero_wait", cfg.B),
           "periodic": lambda: BaselineSpec("periodic", 1, int(rng.integers(1, 5))),
           "callable": lambda: (lambda delta, d: Action(1, 0, delta % 2))}[kind]()
    res = simulate_single(pol, cfg, 3000, seed=seed, log_events=True, keep_aoi=True)
    assert np.array_equal(replay_aoi(res.event_log, 3000, int(res.aoi[0])), res.aoi)
    sends = [s for s, *_ in res.event_log]
    assert sends == sorted(sends)


def test_deterministic_given_seed():
    cfg = SourceConfig(errmodel.synthetic_table("linear", 2, 12, 0.5),
                       TransmissionModel([([1, 2], [0.5, 0.5]), ([1, 3], [0.3, 0.7])]))
    pol = solve_tvfl(cfg)
    a = simulate_single(pol, cfg, 10_000, seed=9, keep_aoi=True)
    b = simulate_single(pol, cfg, 10_000, seed=9, keep_aoi=True)
    c = simulate_single(pol, cfg, 10_000, seed=10, keep_aoi=True)
    assert np.array_equal(a.aoi, b.aoi) and a.time_avg_error == b.time_avg_error
    assert not np.array_equal(a.aoi, c.aoi)


def test_illegal_callable_action():
    cfg = linear_config(B=2, delta_bound=10)
    with pytest.raises(ValueError, match="illegal"):
        simulate_single(lambda delta, d: Action(2, 1, 0), cfg, 100)


def test_result_fields_and_csv(tmp_path):
    cfg = linear_config(delta_bound=20)
    res = simulate_single(BaselineSpec("periodic", 1, 2), cfg, 10_000)
    assert res.aoi_histogram.sum() == 10_000
    assert res.channel_utilization == pytest.approx(0.5, abs=1e-3)
    buf = io.StringIO()
    with redirect_stdout(buf):
        write_results([(res, "x")], "-")
    text = write_results([(res, "x")], tmp_path / "r.csv")
    assert buf.getvalue() == text == (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)


def test_batch_se():
    x = np.random.default_rng(0).normal(size=32_000)
    assert batch_se(x) == pytest.approx(1 / np.sqrt(32_000), rel=0.3)
    assert np.isnan(batch_se(np.ones(10)))


def multi_tables():
    t1 = errmodel.InferenceErrorTable(np.linspace(0.1, 2, 11)[:, None] * np.array([[1.0, 0.6]]))
    t2 = errmodel.InferenceErrorTable(np.linspace(0.3, 1, 11)[:, None] * np.array([[1.0, 0.9]]))
    return t1, t2


def test_single_source_net_gain_equals_relaxed():
    t1, _ = multi_tables()
    cfg = MultiConfig(N=2, tables=[t1])
    pol = policy_at(cfg, 0.0)
    ng = simulate_multi("net_gain", cfg, pol, horizon=5000)
    lb = simulate_multi("relaxed", cfg, pol, horizon=5000)
    assert ng.time_avg_error == lb.time_avg_error


def test_multi_constraint_and_totals():
    t1, t2 = multi_tables()
    cfg = MultiConfig(N=2, tables=[t1, t2, t1, t2])
    pol = policy_at(cfg, 0.05)
    ng = simulate_multi("net_gain", cfg, pol, horizon=5000, keep_trace=True)
    assert all(int(l.sum()) <= 2 for _, _, l, _ in ng.event_log)
    assert ng.time_avg_error == pytest.approx(ng.per_source.sum(), rel=1e-12)
    for spec in (BaselineSpec("maf", 1), BaselineSpec("maf", None)):
        r = simulate_multi(spec, cfg, horizon=5000, keep_trace=True)
        assert all(int(l.sum()) <= 2 for _, _, l, _ in r.event_log)
    idle = MultiConfig(N=0, tables=[t1, t2])
    assert simulate_multi("relaxed", idle, policy_at(idle, 0.0), horizon=500).channel_utilization == 0.0


def test_multi_deterministic():
    t1, t2 = multi_tables()
    cfg = MultiConfig(N=1, tables=[t1, t2, t1])
    pol = policy_at(cfg, 0.02)
    a = simulate_multi("net_gain", cfg, pol, horizon=3000, seed=1)
    b = simulate_multi("net_gain", cfg, pol, horizon=3000, seed=1)
    assert a.time_avg_error == b.time_avg_error and np.array_equal(a.aoi_histogram, b.aoi_histogram)
