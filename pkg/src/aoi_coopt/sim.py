"""Slot-level simulation of single- and multi-source remote-inference systems.

Random numbers come from splitmix64 used as a counter generator: draw ``i`` (``i = 1, 2, ...``)
is ``mix(seed + i * 0x9E3779B97F4A7C15 mod 2^64)``, turned into a uniform as ``(z >> 11) * 2^-53``.
The ``n``-th transmission (``n >= 1``) of a run consumes draw ``n + 1`` and maps it to a transmission
time by inverse CDF over the finite support; draw 1 sets the initial state. Any implementation of
these two steps reproduces the transmission times of a run exactly.

Slot ``t`` carries cost ``err(AoI(t), d(t))``. A feature sent at slot ``S`` from buffer position
``b`` that takes ``T`` slots is delivered at ``D = S + T`` and the AoI in slot ``D`` is ``T + b``.
"""
from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .baselines import BaselineSpec, maf_decide
from .core import Action, SourceConfig, validate_action

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

RESULT_COLUMNS = ("policy", "param", "horizon", "seed", "avg_error", "normalized_error", "utilization")


class SplitMix64:
    """Counter-based splitmix64; ``uniforms(n, start)`` returns draws ``start .. start + n - 1``."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed % (1 << 64))

    def u64(self, n: int, start: int = 1) -> np.ndarray:
        i = np.arange(start, start + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = self.seed + i * GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))

    def uniforms(self, n: int, start: int = 1) -> np.ndarray:
        return (self.u64(n, start) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


class ConstraintViolation(RuntimeError):
    pass


@dataclass
class SimResult:
    horizon: int
    seed: int
    warmup: int
    time_avg_error: float
    std_error: float
    aoi_histogram: np.ndarray
    channel_utilization: float
    policy: str = ""
    per_source: np.ndarray | None = None
    normalized_error: float | None = None
    cycle_avg_error: float | None = None
    mean_backlog: float | None = None
    event_log: list | None = field(default=None, repr=False)
    aoi: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.normalized_error is None:
            m = 1 if self.per_source is None else len(self.per_source)
            self.normalized_error = self.time_avg_error / m

    def row(self, param="") -> dict:
        return {"policy": self.policy, "param": param, "horizon": self.horizon, "seed": self.seed,
                "avg_error": repr(float(self.time_avg_error)),
                "normalized_error": repr(float(self.normalized_error)),
                "utilization": repr(float(self.channel_utilization))}


def warmup_slots(horizon: int, warmup: float | int) -> int:
    if isinstance(warmup, float) and 0 <= warmup < 1:
        w = int(horizon * warmup)
    else:
        w = int(warmup)
    if not 0 <= w < horizon:
        raise ValueError(f"warm-up {warmup!r} leaves no slots in a horizon of {horizon}")
    return w


def batch_se(x: np.ndarray, batches: int = 32) -> float:
    """Standard error of the mean by non-overlapping batch means."""
    n = x.size // batches
    if n < 2:
        return float("nan")
    means = x[: n * batches].reshape(batches, n).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(batches))


def _draw(trans, l: int, u: np.ndarray) -> np.ndarray:
    sup = trans.support(l)
    k = np.searchsorted(trans.cdf(l), u, side="right")
    return sup[np.minimum(k, sup.size - 1)]


def _window_overlap(a: np.ndarray, b: np.ndarray, lo: int, hi: int) -> int:
    return int(np.maximum(np.minimum(b, hi) - np.maximum(a, lo), 0).sum())


def _aggregate(config: SourceConfig, starts, delta0, d, lengths, busy_from, busy_to, horizon, w, seed,
               label, keep_aoi=False, events=None, backlog=None) -> SimResult:
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    keep = starts < horizon
    starts, delta0, d, lengths = starts[keep], np.asarray(delta0)[keep], np.asarray(d)[keep], lengths[keep]
    rep = np.repeat(np.arange(starts.size), lengths)[:horizon]
    t = np.arange(horizon, dtype=np.int64)
    aoi = t - starts[rep] + delta0[rep]
    db = config.delta_bound
    cost = config.table.padded[np.minimum(aoi, db), d[rep]]
    win = cost[w:]
    avg = float(win.mean())
    ends = starts + lengths
    full = (starts >= w) & (ends <= horizon)
    cyc = None
    if full.any():
        s0, e0 = starts[full][0], ends[full][-1]
        # correctly rounded sum, so whole periodic cycles reproduce the renewal ratio to an ulp
        cyc = math.fsum(cost[s0:e0].tolist()) / (e0 - s0)
    hist = np.bincount(np.minimum(aoi, db), minlength=db + 1)
    util = _window_overlap(np.asarray(busy_from), np.asarray(busy_to), w, horizon) / (horizon - w)
    return SimResult(horizon=horizon, seed=seed, warmup=w, time_avg_error=avg, std_error=batch_se(win),
                     aoi_histogram=hist, channel_utilization=util, policy=label, cycle_avg_error=cyc,
                     mean_backlog=backlog, event_log=events, aoi=aoi if keep_aoi else None)


def _initial(config: SourceConfig, rng: SplitMix64, init):
    if init is not None:
        return int(init[0]), int(init[1])
    # a length-1 feature from position 0 delivered at slot 0: AoI 1 + b_0 + T_0 counted from its send
    T0 = int(_draw(config.trans, 1, rng.uniforms(1, 1))[0])
    return 1 + T0, 1


def _policy_kind(policy):
    from .tifl import TiflPolicy
    from .tvfl import TvflPolicy

    if isinstance(policy, TiflPolicy):
        return "tifl", (policy.l_star, policy.b_star, policy.waits)
    if isinstance(policy, BaselineSpec):
        if policy.kind == "zero_wait":
            return "zero-wait", None
        if policy.kind == "periodic":
            return "periodic", None
        raise ValueError("maf is a multi-source baseline")
    if isinstance(policy, TvflPolicy):
        return "tvfl", policy.action
    if callable(policy):
        return "custom", policy
    raise TypeError(f"unsupported single-source policy {policy!r}")


def simulate_single(policy, config: SourceConfig, horizon: int, seed: int = 0, warmup: float | int = 0.01,
                    log_events: bool = False, keep_aoi: bool = False, init=None) -> SimResult:
    """Simulate one source under a TIFL/TVFL policy, a zero-wait/periodic baseline, or a callable.

    A callable gets ``(delta, d)`` at each delivery and returns an ``Action``. The first
    ``warmup`` slots (a fraction if float < 1) are excluded from the averages.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    w = warmup_slots(horizon, warmup)
    rng = SplitMix64(seed)
    kind, info = _policy_kind(policy)
    delta_init, d_init = _initial(config, rng, init)
    B = config.B
    if kind == "periodic":
        return _simulate_periodic(policy, config, horizon, w, seed, rng, delta_init, d_init, log_events, keep_aoi)
    if kind in ("tifl", "zero-wait"):
        if kind == "tifl":
            l, b, waits = info
            label = "tifl"
        else:
            l, b = policy.length(B), 0
            waits = np.zeros(config.delta_bound + 1, dtype=np.int64)
            label = policy.label()
        return _simulate_fixed(config, l, b, waits, horizon, w, seed, rng, delta_init, d_init, label,
                               log_events, keep_aoi)
    return _simulate_generic(info, config, horizon, w, seed, rng, delta_init, d_init, kind, log_events, keep_aoi)


def _simulate_fixed(config, l, b, waits, horizon, w, seed, rng, delta_init, d_init, label, log_events, keep_aoi):
    db = config.delta_bound
    n = horizon + 1  # every cycle lasts at least one slot
    T = _draw(config.trans, l, rng.uniforms(n, 2)).astype(np.int64)
    delta0 = np.empty(n, dtype=np.int64)
    delta0[0] = delta_init
    delta0[1:] = T[:-1] + b
    Z = waits[np.minimum(delta0, db)]
    lengths = Z + T
    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    d = np.full(n, l, dtype=np.int64)
    d[0] = d_init
    send = starts + Z
    events = None
    if log_events:
        keep = send < horizon
        events = [(int(s), int(s + t), int(l), int(b)) for s, t in zip(send[keep], T[keep])]
    return _aggregate(config, starts, delta0, d, lengths, send, send + T, horizon, w, seed, label,
                      keep_aoi, events)


def _simulate_generic(decide: Callable, config, horizon, w, seed, rng, delta_init, d_init, label,
                      log_events, keep_aoi):
    B, db = config.B, config.delta_bound
    trans = config.trans
    starts, delta0s, ds, lengths, sends, dels = [], [], [], [], [], []
    events = [] if log_events else None
    t, delta, d = 0, delta_init, d_init
    chunk, base, u = 4096, 2, None
    k = 0
    while t < horizon:
        a = decide(min(delta, db), d)
        bad = validate_action(a, B)
        if bad:
            raise ValueError(f"policy returned an illegal action at slot {t}: {bad}")
        if u is None or k >= u.size:
            u = rng.uniforms(chunk, base)
            base += chunk
            k = 0
        T = trans.draw(a.l, u[k])
        k += 1
        s = t + a.Z
        starts.append(t)
        delta0s.append(delta)
        ds.append(d)
        lengths.append(a.Z + T)
        sends.append(s)
        dels.append(s + T)
        if events is not None and s < horizon:
            events.append((s, s + T, a.l, a.b))
        t, delta, d = s + T, T + a.b, a.l
    return _aggregate(config, starts, np.array(delta0s), np.array(ds), lengths, sends, dels, horizon, w, seed,
                      label, keep_aoi, events)


def _simulate_periodic(spec: BaselineSpec, config, horizon, w, seed, rng, delta_init, d_init, log_events, keep_aoi):
    l = spec.length(config.B)
    tp = spec.tp
    n = horizon // tp + 2
    g = np.arange(n, dtype=np.int64) * tp
    T = _draw(config.trans, l, rng.uniforms(n, 2)).astype(np.int64)
    # FCFS: D_n = max(D_{n-1}, g_n) + T_n, unrolled as C_n + max_{k<=n}(g_k - C_{k-1})
    C = np.cumsum(T)
    Cprev = np.concatenate(([0], C[:-1]))
    D = C + np.maximum.accumulate(g - Cprev)
    S = D - T
    starts = np.concatenate(([0], D))
    delta0 = np.concatenate(([delta_init], D - g))
    d = np.concatenate(([d_init], np.full(n, l)))
    lengths = np.diff(np.concatenate((starts, [max(horizon, int(D[-1]) + 1)])))
    backlog = _window_overlap(g, S, w, horizon) / (horizon - w)
    events = None
    if log_events:
        keep = S < horizon
        events = [(int(s), int(dd), l, int(s - gg)) for s, dd, gg in zip(S[keep], D[keep], g[keep])]
    return _aggregate(config, starts, delta0, d, lengths, S, D, horizon, w, seed, spec.label(), keep_aoi, events,
                      backlog)


def replay_aoi(events, horizon: int, delta_init: int) -> np.ndarray:
    """AoI per slot rebuilt from ``(send, deliver, l, b)`` records: ``t - (S_i - b_i)`` after delivery ``i``."""
    aoi = np.arange(horizon, dtype=np.int64) + delta_init
    for s, dlv, _, b in events:
        if dlv < horizon:
            aoi[dlv:] = np.arange(dlv, horizon) - (s - b)
    return aoi


# multi-source ---------------------------------------------------------------------------------


def simulate_multi(policy, config, solved=None, horizon: int = 100_000, seed: int = 0,
                   warmup: float | int = 0.01, keep_trace: bool = False) -> SimResult:
    """Simulate ``M`` sources sharing ``N`` channels with one-slot delivery.

    ``policy`` is ``"net_gain"`` or ``"relaxed"`` (both need ``solved``, a MultiPolicy) or a
    ``maf`` BaselineSpec. ``sum_j l_j <= N`` is checked every slot except for the relaxed policy.
    Sources start at AoI 1 with ``d = 1``. The dynamics are deterministic; ``seed`` is recorded only.
    """
    from .multi import NetGainScheduler, RelaxedScheduler, _Stack

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    w = warmup_slots(horizon, warmup)
    stack = _Stack(config.tables)
    M, N = config.M, config.N
    if isinstance(policy, BaselineSpec):
        if policy.kind != "maf":
            raise ValueError("only the maf baseline applies to multiple sources")
        if len(set(config.B)) != 1 and policy.l is None:
            raise ValueError("maf:l=B needs a common buffer size")
        lm = policy.length(min(config.B))
        label = policy.label()

        def step(delta, d):
            l = np.zeros(M, dtype=np.int64)
            l[maf_decide(delta, N, lm)] = lm
            return l, np.zeros(M, dtype=np.int64)
        check = True
    elif policy in ("net_gain", "netgain"):
        sched = NetGainScheduler(config, solved)
        step, label, check = sched.step, "netgain", True
    elif policy in ("relaxed", "lowerbound", "relaxed_lower_bound"):
        sched = RelaxedScheduler(config, solved)
        step, label, check = sched.step, "lowerbound", False
    else:
        raise ValueError(f"unknown multi-source policy {policy!r}")
    delta = np.ones(M, dtype=np.int64)
    d = np.ones(M, dtype=np.int64)
    rows = np.arange(M)
    acc = np.zeros(M)
    per_slot = np.zeros(horizon - w)
    used = 0
    hist = np.zeros((M, stack.dbmax + 1), dtype=np.int64)
    trace = [] if keep_trace else None
    for t in range(horizon):
        dc = np.minimum(delta, stack.db)
        hist[rows, dc] += 1
        c = stack.cost(dc, d)
        maf_view = delta if isinstance(policy, BaselineSpec) else dc
        l, b = step(maf_view, d)
        if check and int(l.sum()) > N:
            raise ConstraintViolation(f"slot {t}: sum of lengths {int(l.sum())} exceeds N={N}")
        if t >= w:
            acc += c
            per_slot[t - w] = c.sum()
            used += int(l.sum())
        if trace is not None:
            trace.append((delta.copy(), d.copy(), l.copy(), b.copy()))
        sent = l > 0
        delta = np.where(sent, 1 + b, delta + 1)
        d = np.where(sent, l, d)
    per_source = acc / (horizon - w)
    total = float(per_slot.mean())
    util = used / ((horizon - w) * N) if N > 0 else 0.0
    res = SimResult(horizon=horizon, seed=seed, warmup=w, time_avg_error=total, std_error=batch_se(per_slot),
                    aoi_histogram=hist, channel_utilization=util, policy=label, per_source=per_source,
                    normalized_error=total / M)
    res.event_log = trace
    return res


def write_results(rows, path="-") -> str:
    """Write result rows (dicts or ``(SimResult, param)`` pairs) as CSV; ``-`` means stdout."""
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        if isinstance(r, tuple):
            r = r[0].row(r[1])
        wr.writerow(r)
    text = buf.getvalue()
    if str(path) == "-":
        sys.stdout.write(text)
    elif path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
