"""Threshold index ``gamma_l(delta, d)`` and the optimal-stopping wait rule built on it.

``gamma_l(delta, d)`` is the smallest running mean of ``u(delta + j)`` over ``j < tau``, where
``u(x) = E[err(x + T(l), d)]``. With clamped tables ``u`` is constant from ``delta_bound - 1``
on, so means with ``tau <= delta_bound`` plus the saturation value (the ``tau -> inf`` limit)
give the exact infimum. For tables that do not saturate this truncation is an approximation.
"""
from __future__ import annotations

import numpy as np

from .core import TransmissionModel
from .errmodel import InferenceErrorTable

# Relative slack for "gamma >= threshold"; ties transmit, and this keeps them from being lost
# to one ulp of rounding in the threshold.
TIE_RTOL = 1e-12


def _tie_slack(p: float) -> float:
    return TIE_RTOL * max(1.0, abs(p))


def _u_row(table: InferenceErrorTable, trans: TransmissionModel, l: int, d: int, upto: int) -> np.ndarray:
    """``u(x) = sum_t P[T(l)=t] err(x + t, d)`` for ``x = 0..upto`` (ascending-t order)."""
    col = table.column(d, upto + trans.max_support)
    x = np.arange(upto + 1)
    out = np.zeros(upto + 1)
    for t, p in zip(trans.support(l), trans.probs(l)):
        out += p * col[x + t]
    return out


def _saturation(table: InferenceErrorTable, trans: TransmissionModel, l: int, d: int) -> float:
    s = 0.0
    for p in trans.probs(l):
        s += p * table.lookup(table.delta_bound, d)
    return s


def _gamma_at(u: np.ndarray, delta: int, tau_max: int, sat: float) -> float:
    seg = u[delta:delta + tau_max]
    # mean written as first term + mean excess, so constant and non-decreasing rows reproduce
    # the tau = 1 term exactly
    means = seg[0] + np.cumsum(seg - seg[0]) / np.arange(1, seg.size + 1)
    return float(min(means.min(), sat))


def gamma(table: InferenceErrorTable, trans: TransmissionModel, l: int, delta: int, d: int) -> float:
    B = table.B
    if not (1 <= l <= B and 1 <= d <= B):
        raise ValueError(f"(l, d) = ({l}, {d}) outside [1, {B}]")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    db = table.delta_bound
    delta = min(delta, db)
    u = _u_row(table, trans, l, d, 2 * db)
    return _gamma_at(u, delta, db, _saturation(table, trans, l, d))


class GammaTable:
    """``gamma_l(delta, d)`` on the full grid; ``values[l, d, delta]`` with ``delta`` in 0..delta_bound."""

    def __init__(self, table: InferenceErrorTable, trans: TransmissionModel):
        self.table = table
        self.trans = trans
        B, db = table.B, table.delta_bound
        self.B, self.delta_bound = B, db
        self.u = np.zeros((B + 1, B + 1, 2 * db + 1))
        self.sat = np.zeros((B + 1, B + 1))
        self.values = np.full((B + 1, B + 1, db + 1), np.nan)
        for l in range(1, B + 1):
            for d in range(1, B + 1):
                u = _u_row(table, trans, l, d, 2 * db)
                sat = _saturation(table, trans, l, d)
                self.u[l, d] = u
                self.sat[l, d] = sat
                for delta in range(db + 1):
                    self.values[l, d, delta] = _gamma_at(u, delta, db, sat)
        for a in (self.u, self.sat, self.values):
            a.setflags(write=False)

    def __call__(self, l: int, delta: int, d: int) -> float:
        return float(self.values[l, d, min(max(delta, 0), self.delta_bound)])

    def wait_times(self, l: int, d: int, threshold: float) -> np.ndarray:
        """Optimal wait ``Z`` from every AoI ``delta`` in 0..delta_bound at price ``threshold``.

        ``Z = min{tau >= 0 : gamma_l(delta + tau, d) >= threshold}``, searched while the
        sending AoI stays <= delta_bound. If no such ``tau`` exists the wait is the exact
        minimiser of ``sum_{k<Z} (u(delta + k) - threshold)`` over that same range.
        """
        db = self.delta_bound
        ok = self.values[l, d] >= threshold - _tie_slack(threshold)
        idx = np.where(ok, np.arange(db + 1), db + 1)
        nxt = np.minimum.accumulate(idx[::-1])[::-1]
        Z = nxt - np.arange(db + 1)
        missing = nxt > db
        if missing.any():
            # first suffix minimum of U(x) = sum_{y<x} (u(y) - threshold) on [delta, db]
            excess = self.u[l, d, :db] - threshold
            U = np.concatenate(([0.0], np.cumsum(excess)))
            slack = _tie_slack(threshold)
            best = np.empty(db + 1, dtype=np.int64)
            cur = db
            for x in range(db, -1, -1):
                if U[x] <= U[cur] + slack:
                    cur = x
                best[x] = cur
            Z = np.where(missing, best - np.arange(db + 1), Z)
        return Z.astype(np.int64)


def gamma_table(table: InferenceErrorTable, trans: TransmissionModel) -> GammaTable:
    return GammaTable(table, trans)


class CycleCosts:
    """Prefix sums of ``err(., d)`` for exact expected costs of wait-then-send cycles."""

    def __init__(self, table: InferenceErrorTable, trans: TransmissionModel, horizon: int | None = None):
        self.table, self.trans = table, trans
        db = table.delta_bound
        self.xmax = horizon if horizon is not None else 2 * db + trans.max_support + 2
        self.cum = np.zeros((table.B + 1, self.xmax + 1))
        for d in range(1, table.B + 1):
            self.cum[d, 1:] = np.cumsum(table.column(d, self.xmax - 1))
        self.cum.setflags(write=False)
        self.tail = table.padded[db].copy()

    def cum_at(self, d: int, x) -> np.ndarray:
        """``sum_{y < x} err(y, d)``, extended linearly past the stored range."""
        x = np.asarray(x, dtype=np.int64)
        inside = np.minimum(x, self.xmax)
        return self.cum[d, inside] + (x - inside) * self.tail[d]

    def segment(self, d: int, start, n) -> np.ndarray:
        start = np.asarray(start, dtype=np.int64)
        return self.cum_at(d, start + n) - self.cum_at(d, start)

    def cycle(self, d: int, l: int, delta, Z):
        """Expected cost and length of waiting ``Z`` from AoI ``delta`` then sending length ``l``.

        Cost covers slots ``delta .. delta + Z + T - 1`` of column ``d``; ``T ~ T(l)``.
        """
        delta = np.asarray(delta, dtype=np.int64)
        Z = np.asarray(Z, dtype=np.int64)
        base = self.cum_at(d, delta)
        wait_end = self.cum_at(d, delta + Z)
        cost = wait_end - base
        for t, p in zip(self.trans.support(l), self.trans.probs(l)):
            cost = cost + p * (self.cum_at(d, delta + Z + t) - wait_end)
        return cost, Z + self.trans.mean(l)
