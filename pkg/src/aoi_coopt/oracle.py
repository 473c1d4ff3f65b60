"""Brute-force reference computations used to cross-check the solvers.

Nothing here shares code with the solvers beyond the table and transmission types.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from itertools import product
from typing import Sequence

import numpy as np

from .core import SourceConfig

MAX_POLICIES = 10_000_000


class TooLarge(ValueError):
    pass


# single source -----------------------------------------------------------------------------------


def _err(config: SourceConfig, x: int, d: int) -> float:
    return config.table.lookup(min(x, config.delta_bound), d)


def _delivery_states(config: SourceConfig):
    """Post-delivery states ``(T(l) + b, l)`` reachable under deterministic transmission times."""
    B = config.B
    states = []
    for l in range(1, B + 1):
        t = int(config.trans.support(l)[0])
        for b in range(0, B - l + 1):
            s = (min(t + b, config.delta_bound), l)
            if s not in states:
                states.append(s)
    return sorted(states)


def single_source_options(config: SourceConfig, z_max: int | None = None):
    """Per delivery state: list of ``(Z, l, b, cost, length, next_state)``.

    Waits run over ``0 .. delta_bound - delta`` (further capped by ``z_max``), i.e. the feature
    is sent no later than when the AoI reaches ``delta_bound``.
    """
    if not config.trans.is_deterministic:
        raise ValueError("the exhaustive oracle needs deterministic transmission times")
    B, db = config.B, config.delta_bound
    states = _delivery_states(config)
    opts = {}
    for delta, d in states:
        zcap = db - delta if z_max is None else min(z_max, db - delta)
        row = []
        for l in range(1, B + 1):
            t = int(config.trans.support(l)[0])
            for b in range(0, B - l + 1):
                nxt = (min(t + b, db), l)
                for Z in range(0, max(zcap, 0) + 1):
                    # accumulate slot by slot in time order
                    cost = 0.0
                    for k in range(Z + t):
                        cost += _err(config, delta + k, d)
                    row.append((Z, l, b, cost, Z + t, nxt))
        opts[(delta, d)] = row
    return states, opts


def exhaustive_single_source(config: SourceConfig, z_max: int | None = None, return_policy: bool = False):
    """Minimum long-run average error over all stationary deterministic policies.

    Every policy on the reachable delivery states is a functional graph; its average from a start
    state is the cost/length ratio of the cycle it falls into, and the best start gives the optimum
    (any delivery state can be entered after one transmission).
    """
    states, opts = single_source_options(config, z_max)
    n = len(states)
    idx = {s: i for i, s in enumerate(states)}
    sizes = [len(opts[s]) for s in states]
    total = math.prod(sizes)
    if total > MAX_POLICIES:
        raise TooLarge(f"{total} policies exceed the enumeration limit {MAX_POLICIES}")
    cost = [np.array([o[3] for o in opts[s]]) for s in states]
    length = [np.array([o[4] for o in opts[s]], dtype=float) for s in states]
    nxt = [np.array([idx[o[5]] for o in opts[s]]) for s in states]
    grids = np.meshgrid(*[np.arange(k) for k in sizes], indexing="ij")
    choice = np.stack([g.reshape(-1) for g in grids], axis=1)  # (P, n)
    P = choice.shape[0]
    C = np.stack([cost[i][choice[:, i]] for i in range(n)], axis=1)
    L = np.stack([length[i][choice[:, i]] for i in range(n)], axis=1)
    X = np.stack([nxt[i][choice[:, i]] for i in range(n)], axis=1)
    rows = np.arange(P)
    period = reduce(math.lcm, range(1, n + 1), 1)
    best = np.full(P, np.inf)
    for start in range(n):
        cur = np.full(P, start)
        for _ in range(n):
            cur = X[rows, cur]
        c = np.zeros(P)
        ln = np.zeros(P)
        for _ in range(period):  # a whole number of laps around the cycle
            c += C[rows, cur]
            ln += L[rows, cur]
            cur = X[rows, cur]
        best = np.minimum(best, c / ln)
    k = int(np.argmin(best))
    if return_policy:
        pol = {s: opts[s][choice[k, i]][:3] for i, s in enumerate(states)}
        return float(best[k]), pol
    return float(best[k])


def joint_value_iteration(config: SourceConfig, z_max: int | None = None, tol: float = 1e-12,
                          max_iter: int = 2_000_000):
    """Optimal average by value iteration over all ``(Z, l, b)`` jointly.

    The semi-Markov problem is first turned into an aperiodic discrete-time one by the usual data
    transformation with step ``eta < min tau``: costs become rates ``c / tau`` and every action
    stays put with probability ``1 - eta / tau``. The per-step increments of the value function
    then bracket the optimal average from both sides, which needs no unichain assumption.

    Returns ``(p_bar, lower, upper)``.
    """
    B, db = config.B, config.delta_bound
    trans = config.trans
    col = {d: config.table.column(d, 2 * db + trans.max_support + 2) for d in range(1, B + 1)}
    cum = {d: np.concatenate(([0.0], np.cumsum(c))) for d, c in col.items()}
    states = [(delta, d) for delta in range(1, db + 1) for d in range(1, B + 1)]
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    owner, cost, tau, rows = [], [], [], []
    for delta, d in states:
        zcap = db - delta if z_max is None else min(z_max, db - delta)
        for l in range(1, B + 1):
            for b in range(0, B - l + 1):
                for Z in range(0, zcap + 1):
                    c = 0.0
                    row = np.zeros(n)
                    for t, p in zip(trans.support(l), trans.probs(l)):
                        c += p * (cum[d][delta + Z + t] - cum[d][delta])
                        row[index[(min(int(t) + b, db), l)]] += p
                    owner.append(index[(delta, d)])
                    cost.append(c)
                    tau.append(Z + trans.mean(l))
                    rows.append(row)
    owner = np.asarray(owner)
    tau = np.asarray(tau)
    eta = 0.5 * tau.min()
    P = (eta / tau)[:, None] * np.asarray(rows)
    P[np.arange(len(owner)), owner] += 1.0 - eta / tau
    rate = np.asarray(cost) / tau
    starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    V = np.zeros(n)
    for _ in range(max_iter):
        W = np.minimum.reduceat(rate + P @ V, starts)
        diff = W - V
        lo, hi = float(diff.min()), float(diff.max())
        if hi - lo <= tol * max(1.0, abs(lo)):
            return 0.5 * (lo + hi), lo, hi
        V = W - W[0]
    raise RuntimeError("value iteration did not converge")


# knapsack -----------------------------------------------------------------------------------------


def exhaustive_knapsack(gains: Sequence[Sequence[float]], N: int):
    """Enumerate every length vector; same tie rules and summation order as the DP."""
    sizes = [len(g) for g in gains]
    if math.prod(sizes) > 1_000_000:
        raise TooLarge("more than 10^6 assignments")
    best = None
    for ls in product(*[range(k) for k in sizes]):  # lexicographic order
        use = sum(ls)
        if use > N:
            continue
        v = 0.0
        for j in range(len(ls) - 1, -1, -1):
            v = float(gains[j][ls[j]]) + v
        if best is None or v > best[0] or (v == best[0] and use < best[1]):
            best = (v, use, ls)
    return tuple(best[2]), best[0]


# L-conditional entropy ------------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint pmf over ``(Y, V_0, V_-1, ..., V_-(K-1))``; ``pmf`` has one axis per variable.

    ``y_values`` gives the numeric value of each target symbol (used by the quadratic loss).
    """

    pmf: np.ndarray
    y_values: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.pmf, dtype=float)
        if p.ndim < 2:
            raise ValueError("need a target axis and at least one observation axis")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be non-negative and sum to 1")
        object.__setattr__(self, "pmf", p)
        yv = np.arange(p.shape[0], dtype=float) if self.y_values is None else np.asarray(self.y_values, float)
        if yv.shape != (p.shape[0],):
            raise ValueError("y_values must match the target alphabet")
        object.__setattr__(self, "y_values", yv)

    @property
    def K(self) -> int:
        return self.pmf.ndim - 1


def _cond_loss(pyx: np.ndarray, y: np.ndarray, loss: str) -> float:
    """``sum_x P(x) min_a E[L(Y, a) | x]`` for a joint matrix ``pyx[y, x]``."""
    px = pyx.sum(axis=0)
    live = px > 0
    pyx, px = pyx[:, live], px[live]
    if loss == "quadratic":
        mean = (y[:, None] * pyx).sum(axis=0) / px
        return float(((y[:, None] - mean[None, :]) ** 2 * pyx).sum())
    if loss == "log":
        cond = pyx / px[None, :]
        m = pyx > 0
        return float(-(pyx[m] * np.log(cond[m])).sum())
    raise ValueError(f"unknown loss {loss!r}")


def l_entropy(joint: DiscreteJoint, loss: str = "log") -> float:
    """``H_L(Y)``: expected loss of the best constant action."""
    py = joint.pmf.reshape(joint.pmf.shape[0], -1).sum(axis=1)
    return _cond_loss(py[:, None], joint.y_values, loss)


def l_conditional_entropy(joint: DiscreteJoint, delta: int, l: int, loss: str = "log") -> float:
    """``H_L(Y | V_-delta, ..., V_-(delta+l-1))`` by direct enumeration of feature values."""
    if l < 0 or delta < 0:
        raise ValueError("delta and l must be non-negative")
    if delta + l > joint.K:
        raise ValueError(f"delta + l = {delta + l} exceeds the modeled horizon K = {joint.K}")
    if l == 0:
        return l_entropy(joint, loss)
    keep = [0] + list(range(1 + delta, 1 + delta + l))
    drop = tuple(ax for ax in range(joint.pmf.ndim) if ax not in keep)
    marg = joint.pmf.sum(axis=drop)
    return _cond_loss(marg.reshape(marg.shape[0], -1), joint.y_values, loss)


def random_joint(rng: np.random.Generator, K: int = 3, ny: int = 2, nv: int = 2) -> DiscreteJoint:
    p = rng.dirichlet(np.full(ny * nv ** K, 0.5)).reshape((ny,) + (nv,) * K)
    return DiscreteJoint(p, y_values=rng.normal(size=ny))


def binary_markov_joint(flip: float, noise: float, K: int) -> DiscreteJoint:
    """Binary symmetric Markov chain ``X_0, X_-1, ...`` (switch probability ``flip``), target
    ``Y = X_0`` and observations ``V_-k = X_-k`` passed through a binary symmetric channel."""
    p = np.zeros((2,) * (K + 1))
    for xs in product((0, 1), repeat=K):  # xs[k] = X_-k
        px = 0.5
        for k in range(1, K):
            px *= flip if xs[k] != xs[k - 1] else 1 - flip
        for vs in product((0, 1), repeat=K):
            pv = 1.0
            for k in range(K):
                pv *= noise if vs[k] != xs[k] else 1 - noise
            p[(xs[0],) + vs] += px * pv
    return DiscreteJoint(p, y_values=np.array([0.0, 1.0]))
