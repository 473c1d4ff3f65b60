"""Multi-source scheduling: Lagrangian relaxation, per-source RVI, Net Gain tables and the per-slot knapsack.

Every source delivers in the next slot, so a source in state ``(delta, d)`` moves to
``(delta + 1, d)`` when idle and to ``(b + 1, l)`` after sending length ``l`` from position ``b``.
Arrays are indexed ``[delta, d]`` (and ``[delta, d, l]``) with unused row/column 0.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errmodel import InferenceErrorTable, JakesParams, jakes_error_table, load_csv

log = logging.getLogger(__name__)

REF = (1, 1)
EPS_LAMBDA = 1e-4
RVI_TOL = 1e-8
RVI_KAPPA = 0.5

# (velocity m/s, CSI variance) of the three source types used in the multi-source evaluation
SOURCE_TYPES = ((15.0, 0.5), (20.0, 0.1), (25.0, 1.0))


class NotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DualSettings:
    beta: float = 1e-4
    theta: float = 1e-9
    lambda0: float = 0.0
    eps_lambda: float = EPS_LAMBDA
    max_iter: int = 1_000_000
    min_iter: int = 1


@dataclass(frozen=True)
class MultiConfig:
    """``N`` channels shared by sources with error tables ``tables[j]`` (``B_j``, ``delta_bound_j`` implied)."""

    N: int
    tables: tuple
    dual: DualSettings = DualSettings()

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if len(self.tables) < 1:
            raise ValueError("need at least one source")
        for j, t in enumerate(self.tables):
            if t.delta_bound < t.B + 1:
                raise ValueError(f"source {j}: delta_bound={t.delta_bound} must be >= B + 1 = {t.B + 1}")

    @property
    def M(self) -> int:
        return len(self.tables)

    @property
    def B(self) -> tuple:
        return tuple(t.B for t in self.tables)

    @classmethod
    def from_json(cls, path) -> "MultiConfig":
        path = Path(path)
        raw = json.loads(path.read_text())
        tables = []
        for j, s in enumerate(raw["sources"]):
            tp = Path(s["table"])
            if not tp.is_absolute():
                tp = path.parent / tp
            t = load_csv(tp)
            if "B" in s:
                if s["B"] > t.B:
                    raise ValueError(f"source {j}: B={s['B']} but {tp} only has {t.B} lengths")
                t = t.truncate(int(s["B"]))
            if "delta_bound" in s and int(s["delta_bound"]) != t.delta_bound:
                raise ValueError(f"source {j}: delta_bound={s['delta_bound']} but {tp} has {t.delta_bound}")
            tables.append(t)
        d = raw.get("dual", {})
        dual = DualSettings(**{k: d[k] for k in ("beta", "theta", "lambda0", "eps_lambda", "max_iter", "min_iter")
                               if k in d})
        return cls(N=int(raw["N"]), tables=tables, dual=dual)


def three_type_config(r: int = 1, B: int = 10, delta_bound: int = 50, fc: float = 2e9, ts: float = 1e-3,
                      sigma2: float = 1e-6, N: int | None = None, M: int | None = None,
                      theta: float = 1e-9) -> MultiConfig:
    """Sources of the three CSI types, interleaved 1,2,3,1,2,3,...; defaults ``M = 3r``, ``N = 10r``.

    Step size ``1e-4 / (k r)``.
    """
    M = 3 * r if M is None else M
    N = 10 * r if N is None else N
    types = [jakes_error_table(JakesParams.from_velocity(v, fc, ts=ts, b=var, sigma2=sigma2), B, delta_bound)
             for v, var in SOURCE_TYPES]
    tables = [types[j % 3] for j in range(M)]
    return MultiConfig(N=N, tables=tables, dual=DualSettings(beta=1e-4 / r, theta=theta))


@dataclass
class SourceValueTables:
    table: InferenceErrorTable
    lam: float
    h: np.ndarray  # [delta, d]
    p_bar: float  # average of err + lam * l under the relaxed-optimal policy
    b_hat: np.ndarray  # [l], b_hat[0] = 0
    sweeps: int = 0

    @property
    def B(self) -> int:
        return self.table.B

    @property
    def delta_bound(self) -> int:
        return self.table.delta_bound

    def base_gain(self) -> np.ndarray:
        """``h(delta+1, d) - h(b_hat(l)+1, l)`` as ``[delta, d, l]``; the Net Gain is this minus ``lam * l``."""
        db, B = self.delta_bound, self.B
        nxt = self.h[np.minimum(np.arange(db + 1) + 1, db)]  # [delta, d]
        land = np.array([0.0] + [self.h[self.b_hat[l] + 1, l] for l in range(1, B + 1)])
        out = nxt[:, :, None] - land[None, None, :]
        out[:, :, 0] = 0.0
        out[0] = 0.0
        out[:, 0] = 0.0
        return out

    def alpha(self, lam: float | None = None) -> np.ndarray:
        lam = self.lam if lam is None else lam
        return self.base_gain() - lam * np.arange(self.B + 1)[None, None, :]

    def relaxed_lengths(self, lam: float | None = None) -> np.ndarray:
        """First maximiser of the Net Gain over ``l`` in 0..B (idle wins ties)."""
        a = self.alpha(lam)
        out = np.argmax(a, axis=2)
        out[0] = 0
        out[:, 0] = 0
        return out


def _bellman(h: np.ndarray, cost: np.ndarray, lam: float):
    """Bellman operator of the priced per-slot MDP; ``h`` and ``cost`` are indexed [delta, d]."""
    db, B = h.shape[0] - 1, h.shape[1] - 1
    idle = h[np.minimum(np.arange(2, db + 2), db), 1:]  # rows delta=1..db
    land = np.array([h[1:B - l + 2, l].min() + lam * l for l in range(1, B + 1)])
    send = land.min()
    Th = np.zeros_like(h)
    Th[1:, 1:] = cost[1:, 1:] + np.minimum(idle, send)
    return Th


def best_position(h: np.ndarray, l: int) -> int:
    """``argmin_b h(b + 1, l)`` over ``b`` in 0..B-l, first minimiser."""
    B = h.shape[1] - 1
    if not 1 <= l <= B:
        raise ValueError(f"length {l} outside [1, {B}]")
    return int(np.argmin(h[1:B - l + 2, l]))


def rvi_source(table: InferenceErrorTable, lam: float, h0: np.ndarray | None = None, tol: float = RVI_TOL,
               max_sweeps: int = 1_000_000, kappa: float = RVI_KAPPA) -> SourceValueTables:
    """Relative value iteration for one source at transmission price ``lam``.

    Runs on the aperiodic transform ``h <- (1 - kappa) h + kappa T h`` (same optimal policies and
    relative values; needed because the AoI dynamics are deterministic and periodic), anchored at
    state (1, 1). Stops when the span of ``T h - h`` drops to ``tol``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    B, db = table.B, table.delta_bound
    cost = table.padded
    h = np.zeros((db + 1, B + 1)) if h0 is None else np.array(h0, dtype=float)
    r0, c0 = REF
    for sweep in range(1, max_sweeps + 1):
        diff = _bellman(h, cost, lam)[1:, 1:] - h[1:, 1:]
        span = float(diff.max() - diff.min())
        g = float(diff[r0 - 1, c0 - 1])
        h[1:, 1:] += kappa * diff
        h[1:, 1:] -= h[r0, c0]
        if span <= tol:
            break
    else:
        raise NotConverged(f"relative value iteration did not settle in {max_sweeps} sweeps (span {span:.3g})")
    b_hat = np.zeros(B + 1, dtype=np.int64)
    for l in range(1, B + 1):
        b_hat[l] = best_position(h, l)
    return SourceValueTables(table=table, lam=float(lam), h=h, p_bar=g, b_hat=b_hat, sweeps=sweep)


def rvi_residual(t: SourceValueTables) -> float:
    """``max |h - (T h - p_bar)|`` over states."""
    Th = _bellman(t.h, t.table.padded, t.lam)
    return float(np.max(np.abs(t.h[1:, 1:] - (Th[1:, 1:] - t.p_bar))))


def net_gain(tables: SourceValueTables, lam: float, delta: int, d: int, l: int) -> float:
    """``alpha(delta, d, l) = h(delta+1, d) - h(b_hat(l)+1, l) - lam * l`` (0 for ``l = 0``), clamped lookups."""
    if l == 0:
        return 0.0
    db = tables.delta_bound
    delta = min(max(delta, 1), db)
    h = tables.h
    return float((h[min(delta + 1, db), d] - h[tables.b_hat[l] + 1, l]) - lam * l)


def knapsack_select(gains: Sequence[Sequence[float]], N: int):
    """Choose one length per source maximising total gain subject to ``sum l_j <= N``.

    ``gains[j][l]`` for ``l`` in 0..B_j with ``gains[j][0] == 0``. Ties: larger total gain,
    then fewer channels, then the lexicographically smallest length vector. Totals are
    accumulated from the last source backwards. Returns ``(lengths, value)``.
    """
    M = len(gains)
    g = [np.asarray(x, dtype=float) for x in gains]
    V = np.zeros((M + 1, N + 1))
    U = np.zeros((M + 1, N + 1), dtype=np.int64)
    caps = np.arange(N + 1)
    for j in range(M - 1, -1, -1):
        best_v = np.full(N + 1, -np.inf)
        best_u = np.zeros(N + 1, dtype=np.int64)
        for l in range(0, min(g[j].size - 1, N) + 1):
            ok = caps >= l
            cv = np.full(N + 1, -np.inf)
            cu = np.zeros(N + 1, dtype=np.int64)
            cv[ok] = g[j][l] + V[j + 1, caps[ok] - l]
            cu[ok] = l + U[j + 1, caps[ok] - l]
            better = (cv > best_v) | ((cv == best_v) & (cu < best_u))
            best_v = np.where(better, cv, best_v)
            best_u = np.where(better, cu, best_u)
        V[j], U[j] = best_v, best_u
    out = []
    c = N
    for j in range(M):
        for l in range(0, min(g[j].size - 1, c) + 1):
            if g[j][l] + V[j + 1, c - l] == V[j, c] and l + U[j + 1, c - l] == U[j, c]:
                out.append(l)
                c -= l
                break
        else:  # pragma: no cover - the DP always has a witness
            raise AssertionError("knapsack reconstruction failed")
    return tuple(out), float(V[0, N])


class _Stack:
    """Per-source tables stacked (sources sharing a table share one slot) for vectorised lookups."""

    def __init__(self, tables: Sequence[InferenceErrorTable]):
        uniq, kind = [], []
        for t in tables:
            for k, u in enumerate(uniq):
                if u is t or u == t:
                    kind.append(k)
                    break
            else:
                kind.append(len(uniq))
                uniq.append(t)
        self.unique = uniq
        self.kind = np.array(kind, dtype=np.int64)
        self.B = np.array([t.B for t in tables], dtype=np.int64)
        self.db = np.array([t.delta_bound for t in tables], dtype=np.int64)
        self.Bmax = int(self.B.max())
        self.dbmax = int(self.db.max())
        self.err = np.zeros((len(uniq), self.dbmax + 1, self.Bmax + 1))
        for k, t in enumerate(uniq):
            self.err[k, :t.delta_bound + 1, :t.B + 1] = t.padded

    def cost(self, delta, d) -> np.ndarray:
        return self.err[self.kind, delta, d]


@dataclass
class MultiPolicy:
    lam: float
    sources: list  # SourceValueTables per source (shared where tables coincide)
    N: int
    history: list = field(default_factory=list, repr=False)
    iterations: int = 0

    @property
    def M(self) -> int:
        return len(self.sources)

    def dual_bound(self) -> float:
        """``q(lam) = sum_j p_bar_j(lam) - lam N``, a lower bound on the optimal total error."""
        return float(sum(s.p_bar for s in self.sources) - self.lam * self.N)

    def to_json(self) -> dict:
        return {
            "lambda_star": self.lam,
            "N": self.N,
            "iterations": self.iterations,
            "dual_bound": self.dual_bound(),
            "sources": [
                {"B": s.B, "delta_bound": s.delta_bound, "p_bar": s.p_bar, "b_hat": s.b_hat[1:].tolist(),
                 "h": s.h[1:, 1:].tolist()}
                for s in self.sources
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: dict, config: MultiConfig) -> "MultiPolicy":
        if len(obj["sources"]) != config.M:
            raise ValueError(f"policy covers {len(obj['sources'])} sources, config has {config.M}")
        lam = float(obj["lambda_star"])
        sources = []
        for j, (s, t) in enumerate(zip(obj["sources"], config.tables)):
            if s["B"] != t.B or s["delta_bound"] != t.delta_bound:
                raise ValueError(f"source {j}: policy dimensions do not match its table")
            h = np.zeros((t.delta_bound + 1, t.B + 1))
            h[1:, 1:] = np.asarray(s["h"], dtype=float)
            b_hat = np.array([0] + list(s["b_hat"]), dtype=np.int64)
            sources.append(SourceValueTables(t, lam, h, float(s["p_bar"]), b_hat))
        return cls(lam=lam, sources=sources, N=config.N, iterations=int(obj.get("iterations", 0)))


class _GainBank:
    """Net Gain lookups for all sources at a fixed ``lam``; rows padded with -inf past ``B_j``."""

    def __init__(self, stack: _Stack, solved: dict, lam: float):
        self.stack = stack
        self.lam = lam
        K = len(stack.unique)
        self.base = np.full((K, stack.dbmax + 1, stack.Bmax + 1, stack.Bmax + 1), -np.inf)
        self.b_hat = np.zeros((K, stack.Bmax + 1), dtype=np.int64)
        for k, t in enumerate(stack.unique):
            s = solved[k]
            self.base[k, :t.delta_bound + 1, :t.B + 1, :t.B + 1] = s.base_gain()
            self.b_hat[k, :t.B + 1] = s.b_hat
        self.price = lam * np.arange(stack.Bmax + 1)

    def rows(self, delta, d) -> np.ndarray:
        return self.base[self.stack.kind, delta, d] - self.price[None, :]

    def positions(self, l) -> np.ndarray:
        return self.b_hat[self.stack.kind, l]


def _solve_all(stack: _Stack, lam: float, warm: dict | None) -> dict:
    out = {}
    for k, t in enumerate(stack.unique):
        h0 = warm[k].h if warm else None
        out[k] = rvi_source(t, lam, h0=h0)
    return out


def _advance(stack: _Stack, delta, d, l, b):
    sent = l > 0
    nd = np.where(sent, 1 + b, np.minimum(delta + 1, stack.db))
    nl = np.where(sent, l, d)
    return nd, nl


def dual_ascent(config: MultiConfig, beta: float | None = None, theta: float | None = None,
                lambda0: float | None = None, eps_lambda: float | None = None,
                max_iter: int | None = None, min_iter: int | None = None) -> MultiPolicy:
    """Stochastic subgradient ascent on the dual price.

    Each iteration moves every source one slot under its relaxed-optimal action at the current
    price (idle sources age, senders land at ``(1 + b, l)``), then sets
    ``lam <- max(lam + beta/k * (sum_j l_j - N), 0)``. Stops once ``|lam_{k+1} - lam_k| <= theta``
    (after at least ``min_iter`` iterations). Relative values are re-solved only when the price has
    moved more than ``eps_lambda`` since the last solve; the ``- lam * l`` term always uses the
    current price. Sources start at (1, 1) with no feature in flight.
    """
    s = config.dual
    beta = s.beta if beta is None else beta
    theta = s.theta if theta is None else theta
    lam = s.lambda0 if lambda0 is None else lambda0
    eps_lambda = s.eps_lambda if eps_lambda is None else eps_lambda
    max_iter = s.max_iter if max_iter is None else max_iter
    min_iter = s.min_iter if min_iter is None else min_iter
    if beta <= 0:
        raise ValueError("step size beta must be positive")
    stack = _Stack(config.tables)
    M = config.M
    solved = _solve_all(stack, lam, None)
    lam_solved = lam
    bank = _GainBank(stack, solved, lam)
    delta = np.ones(M, dtype=np.int64)
    d = np.ones(M, dtype=np.int64)
    l = np.zeros(M, dtype=np.int64)
    b = np.zeros(M, dtype=np.int64)
    history = [lam]
    price = np.arange(stack.Bmax + 1)[None, :]
    for k in range(1, max_iter + 1):
        delta, d = _advance(stack, delta, d, l, b)
        if abs(lam - lam_solved) > eps_lambda:
            solved = _solve_all(stack, lam, solved)
            lam_solved = lam
            bank = _GainBank(stack, solved, lam)
        rows = bank.base[stack.kind, delta, d] - lam * price
        l = np.argmax(rows, axis=1)
        b = np.where(l > 0, bank.positions(l), 0)
        new = max(lam + beta / k * (int(l.sum()) - config.N), 0.0)
        history.append(new)
        step = abs(new - lam)
        lam = new
        if step <= theta and k >= min_iter:
            break
    else:
        raise NotConverged(f"dual ascent did not settle within {max_iter} iterations (lambda={lam:.6g})")
    if lam != lam_solved:
        solved = _solve_all(stack, lam, solved)
    sources = [solved[k] for k in stack.kind]
    log.info("dual ascent: lambda*=%.6g after %d iterations", lam, k)
    return MultiPolicy(lam=float(lam), sources=sources, N=config.N, history=history, iterations=k)


def solve_multi(config: MultiConfig, **kw) -> MultiPolicy:
    return dual_ascent(config, **kw)


def policy_at(config: MultiConfig, lam: float) -> MultiPolicy:
    """Relaxed-problem tables at a given price (no dual search)."""
    stack = _Stack(config.tables)
    solved = _solve_all(stack, lam, None)
    return MultiPolicy(lam=float(lam), sources=[solved[k] for k in stack.kind], N=config.N)


class NetGainScheduler:
    """Per-slot Net Gain Maximization: knapsack over the sources' gain rows at ``lam*``.

    The decision depends only on the joint state, so solved slots are memoised.
    """

    def __init__(self, config: MultiConfig, policy: MultiPolicy):
        self.config = config
        self.policy = policy
        self.stack = _Stack(config.tables)
        solved = {}
        for j, k in enumerate(self.stack.kind):
            solved.setdefault(int(k), policy.sources[j])
        self.bank = _GainBank(self.stack, solved, policy.lam)
        self._memo: dict = {}

    def step(self, delta: np.ndarray, d: np.ndarray):
        key = delta.tobytes() + d.tobytes()
        hit = self._memo.get(key)
        if hit is None:
            rows = self.bank.rows(delta, d)
            lens, _ = knapsack_select([rows[j, :self.stack.B[j] + 1] for j in range(rows.shape[0])], self.config.N)
            l = np.array(lens, dtype=np.int64)
            b = np.where(l > 0, self.bank.positions(l), 0)
            hit = (l, b)
            self._memo[key] = hit
        return hit


def net_gain_policy_step(config: MultiConfig, policy: MultiPolicy, delta, d, scheduler: NetGainScheduler | None = None):
    """Lengths and positions for every source in the given states."""
    sched = scheduler or NetGainScheduler(config, policy)
    return sched.step(np.asarray(delta, dtype=np.int64), np.asarray(d, dtype=np.int64))


class RelaxedScheduler:
    """Each source independently follows its relaxed-optimal action at ``lam*`` (constraint ignored)."""

    def __init__(self, config: MultiConfig, policy: MultiPolicy):
        self.stack = _Stack(config.tables)
        solved = {}
        for j, k in enumerate(self.stack.kind):
            solved.setdefault(int(k), policy.sources[j])
        self.bank = _GainBank(self.stack, solved, policy.lam)

    def step(self, delta, d):
        rows = self.bank.rows(delta, d)
        l = np.argmax(rows, axis=1)
        b = np.where(l > 0, self.bank.positions(l), 0)
        return l, b


def lower_bound_eval(config: MultiConfig, policy: MultiPolicy, horizon: int, seed: int = 0,
                     warmup: float = 0.01) -> float:
    """Total time-average error of the relaxed policy at ``lam*`` (price terms excluded)."""
    from .sim import simulate_multi

    return simulate_multi("relaxed", config, policy, horizon=horizon, seed=seed, warmup=warmup).time_avg_error


__all__ = [
    "MultiConfig", "DualSettings", "SourceValueTables", "MultiPolicy", "three_type_config", "rvi_source",
    "rvi_residual", "best_position", "net_gain", "knapsack_select", "dual_ascent", "solve_multi", "policy_at",
    "NetGainScheduler", "RelaxedScheduler", "net_gain_policy_step", "lower_bound_eval",
]
