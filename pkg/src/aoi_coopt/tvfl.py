"""Optimal policy with a time-variant feature length: policy iteration on the delivery-epoch SMDP.

States are ``(delta, d)`` at delivery epochs, ``delta`` in 1..delta_bound and ``d`` in 1..B.
Arrays are indexed ``[delta, d]`` with row 0 and column 0 unused. After choosing length ``l``
the best wait is the index threshold ``Z_l`` and the best position minimises the expected
relative value of the next delivery state ``(T(l) + b, l)``, so improvement only searches over
``l``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from .core import Action, SourceConfig
from .index import CycleCosts, GammaTable, _tie_slack

log = logging.getLogger(__name__)

REF = (1, 1)


class NotConverged(RuntimeError):
    pass


@dataclass
class PolicyMaps:
    Z: np.ndarray
    l: np.ndarray
    b: np.ndarray

    def copy(self) -> "PolicyMaps":
        return PolicyMaps(self.Z.copy(), self.l.copy(), self.b.copy())

    def same(self, other: "PolicyMaps") -> bool:
        return (np.array_equal(self.Z, other.Z) and np.array_equal(self.l, other.l)
                and np.array_equal(self.b, other.b))


@dataclass
class TvflPolicy:
    Z: np.ndarray
    l: np.ndarray
    b: np.ndarray
    h: np.ndarray
    p_bar: float
    history: list = field(default_factory=list, repr=False)

    @property
    def delta_bound(self) -> int:
        return self.Z.shape[0] - 1

    @property
    def B(self) -> int:
        return self.Z.shape[1] - 1

    def maps(self) -> PolicyMaps:
        return PolicyMaps(self.Z, self.l, self.b)

    def action(self, delta: int, d: int) -> Action:
        delta = min(max(delta, 1), self.delta_bound)
        return Action(int(self.l[delta, d]), int(self.b[delta, d]), int(self.Z[delta, d]))

    def to_json(self) -> dict:
        def m(a):
            return a[1:, 1:].tolist()

        return {"delta_bound": self.delta_bound, "B": self.B, "p_bar": self.p_bar,
                "h": m(self.h), "Z": m(self.Z), "l": m(self.l), "b": m(self.b)}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: dict) -> "TvflPolicy":
        db, B = int(obj["delta_bound"]), int(obj["B"])

        def pad(m, dtype):
            a = np.asarray(m, dtype=dtype)
            if a.shape != (db, B):
                raise ValueError(f"policy matrix has shape {a.shape}, expected ({db}, {B})")
            out = np.zeros((db + 1, B + 1), dtype=dtype)
            out[1:, 1:] = a
            return out

        return cls(pad(obj["Z"], np.int64), pad(obj["l"], np.int64), pad(obj["b"], np.int64),
                   pad(obj["h"], float), float(obj["p_bar"]))


class SmdpModel:
    """Precomputed expectations for the truncated delivery-epoch SMDP of one source."""

    def __init__(self, config: SourceConfig, gam: GammaTable | None = None):
        self.config = config
        self.B, self.db = config.B, config.delta_bound
        self.gamma = gam if gam is not None else GammaTable(config.table, config.trans)
        self.costs = CycleCosts(config.table, config.trans)
        self.deltas = np.arange(self.db + 1)
        self.n = self.db * self.B

    def index(self, delta, d):
        return (np.asarray(delta) - 1) * self.B + (np.asarray(d) - 1)

    def next_states(self, l: int, b: int):
        """Delivery-state distribution ``[(delta', d', prob)]`` after sending ``(l, b)``."""
        tr = self.config.trans
        return [(min(int(t) + b, self.db), l, float(p)) for t, p in zip(tr.support(l), tr.probs(l))]

    def exp_h(self, h: np.ndarray, l: int, b: int) -> float:
        return sum(p * h[s, d] for s, d, p in self.next_states(l, b))

    def cycle(self, d: int, l: int, Z: np.ndarray):
        """Cost and length from every delta (0..db) in column ``d`` with waits ``Z``."""
        return self.costs.cycle(d, l, self.deltas, Z)

    def waits(self, l: int, d: int, p_bar: float) -> np.ndarray:
        return self.gamma.wait_times(l, d, p_bar)

    def stage(self, maps: PolicyMaps):
        """Per-state expected cost, expected sojourn and sparse transition matrix."""
        c = np.zeros((self.db + 1, self.B + 1))
        tau = np.zeros_like(c)
        rows, cols, vals = [], [], []
        for d in range(1, self.B + 1):
            for l in np.unique(maps.l[1:, d]):
                sel = np.flatnonzero(maps.l[:, d] == l)
                sel = sel[sel >= 1]
                cost, length = self.costs.cycle(d, int(l), sel, maps.Z[sel, d])
                c[sel, d] = cost
                tau[sel, d] = length
        for delta in range(1, self.db + 1):
            for d in range(1, self.B + 1):
                i = self.index(delta, d)
                for s2, d2, p in self.next_states(int(maps.l[delta, d]), int(maps.b[delta, d])):
                    rows.append(i)
                    cols.append(self.index(s2, d2))
                    vals.append(p)
        P = sparse.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))
        P.sum_duplicates()
        return c, tau, P

    def flat(self, a: np.ndarray) -> np.ndarray:
        return a[1:, 1:].reshape(-1)

    def unflat(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((self.db + 1, self.B + 1))
        out[1:, 1:] = v.reshape(self.db, self.B)
        return out


def closed_classes(P: sparse.csr_matrix) -> list[np.ndarray]:
    """Recurrent classes (closed strongly connected components) of a transition matrix."""
    ncomp, labels = csgraph.connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = np.zeros(ncomp, dtype=bool)
    mask = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[mask]]] = True
    return [np.flatnonzero(labels == k) for k in range(ncomp) if not leaving[k]]


def _class_gain(c: np.ndarray, tau: np.ndarray, P: sparse.csr_matrix, members: np.ndarray) -> float:
    sub = P[members][:, members].toarray()
    m = members.size
    A = np.vstack([sub.T - np.eye(m), np.ones(m)])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return float(pi @ c[members] / (pi @ tau[members]))


def _make_unichain(model: SmdpModel, maps: PolicyMaps, c, tau, P):
    """Send states of worse recurrent classes into the best one (in one delivery)."""
    cf, tf = model.flat(c), model.flat(tau)
    classes = closed_classes(P)
    if len(classes) <= 1:
        return maps, False
    gains = [_class_gain(cf, tf, P, m) for m in classes]
    best = int(np.argmin(gains))
    rep = classes[best][0]
    rd, rdd = divmod(int(rep), model.B)
    l_rep, b_rep = int(maps.l[rd + 1, rdd + 1]), int(maps.b[rd + 1, rdd + 1])
    maps = maps.copy()
    for k, members in enumerate(classes):
        if k == best:
            continue
        for i in members:
            dd, ddd = divmod(int(i), model.B)
            delta, d = dd + 1, ddd + 1
            maps.l[delta, d], maps.b[delta, d] = l_rep, b_rep
            maps.Z[delta, d] = model.waits(l_rep, d, gains[best])[delta]
    log.debug("redirected %d recurrent classes into class with gain %.6g", len(classes) - 1, gains[best])
    return maps, True


def policy_evaluate(maps: PolicyMaps, config: SourceConfig, model: SmdpModel | None = None,
                    method: str = "direct", tol: float = 1e-8, max_sweeps: int = 100_000):
    """Average error ``p_bar`` and relative values ``h`` (``h`` = 0 at state (1, 1)).

    ``method="direct"`` solves ``h = c - p_bar * tau + P h`` exactly. ``method="sweep"``
    runs the fixed-point recursion: recompute ``p_bar`` from the reference state, then update
    every state from the previous ``h``. The sweep is only guaranteed to settle when the chain
    returns to the reference state with short enough cycles; it raises NotConverged otherwise.
    A policy with more than one recurrent class has no single average and raises ValueError.
    """
    model = model or SmdpModel(config)
    c, tau, P = model.stage(maps)
    k = len(closed_classes(P))
    if k > 1:
        raise ValueError(f"policy has {k} recurrent classes; its average depends on the start state")
    if method == "direct":
        return _evaluate_direct(model, c, tau, P)
    if method == "sweep":
        return _evaluate_sweep(model, maps, c, tau, tol, max_sweeps)
    raise ValueError(f"unknown evaluation method {method!r}")


def _evaluate_direct(model: SmdpModel, c, tau, P):
    n = model.n
    ref = int(model.index(*REF))
    A = (sparse.identity(n, format="csc") - P.tocsc()).tolil()
    A[:, ref] = model.flat(tau)[:, None]
    x = spsolve(A.tocsc(), model.flat(c))
    if not np.all(np.isfinite(x)):
        raise NotConverged("policy evaluation system is singular (multichain policy)")
    p_bar = float(x[ref])
    x[ref] = 0.0
    return p_bar, model.unflat(x)


def _evaluate_sweep(model: SmdpModel, maps: PolicyMaps, c, tau, tol, max_sweeps):
    h = np.zeros((model.db + 1, model.B + 1))
    nxt = {}
    for l in range(1, model.B + 1):
        for b in range(0, model.B - l + 1):
            nxt[l, b] = model.next_states(l, b)
    L, Bm = maps.l, maps.b
    d0, dd0 = REF
    for sweep in range(max_sweeps):
        def cont(delta, d):
            return sum(p * h[s, dd] for s, dd, p in nxt[int(L[delta, d]), int(Bm[delta, d])])

        p_bar = (c[d0, dd0] + cont(d0, dd0)) / tau[d0, dd0]
        new = np.zeros_like(h)
        with np.errstate(over="ignore", invalid="ignore"):  # a diverging sweep is reported below
            for delta in range(1, model.db + 1):
                for d in range(1, model.B + 1):
                    new[delta, d] = c[delta, d] - p_bar * tau[delta, d] + cont(delta, d)
            theta = float(np.max(np.abs(new - h)))
        h = new
        if theta <= tol:
            h[d0, dd0] = 0.0
            return float(p_bar), h
        if not np.isfinite(theta):
            break
    raise NotConverged(f"policy evaluation sweeps did not settle (last change {theta:.3g})")


def _improve_terms(model: SmdpModel, h: np.ndarray, p_bar: float):
    """Right-hand side of the decomposed Bellman equation for every (delta, d, l)."""
    B, db = model.B, model.db
    total = np.full((db + 1, B + 1, B + 1), np.inf)
    waits = np.zeros((db + 1, B + 1, B + 1), dtype=np.int64)
    bhat = np.zeros(B + 1, dtype=np.int64)
    for l in range(1, B + 1):
        vals = [model.exp_h(h, l, b) for b in range(0, B - l + 1)]
        bhat[l] = int(np.argmin(vals))
        cont = vals[bhat[l]]
        for d in range(1, B + 1):
            Z = model.waits(l, d, p_bar)
            cost, length = model.cycle(d, l, Z)
            total[:, d, l] = cost - p_bar * length + cont
            waits[:, d, l] = Z
    return total, waits, bhat


def policy_improve(h: np.ndarray, p_bar: float, config: SourceConfig, model: SmdpModel | None = None,
                   current: PolicyMaps | None = None) -> PolicyMaps:
    """Greedy policy for ``(h, p_bar)``: best length, then best position, then threshold wait.

    Ties go to the smaller ``l``. With ``current`` given, a state keeps its action unless the
    new one is better by more than rounding noise, which rules out cycling between equal policies.
    """
    model = model or SmdpModel(config)
    total, waits, bhat = _improve_terms(model, h, p_bar)
    B, db = model.B, model.db
    new = PolicyMaps(np.zeros((db + 1, B + 1), dtype=np.int64), np.ones((db + 1, B + 1), dtype=np.int64),
                     np.zeros((db + 1, B + 1), dtype=np.int64))
    best_l = np.argmin(total[:, :, 1:], axis=2) + 1
    finite = total[1:, 1:, 1:]
    scale = max(float(np.abs(h).max()), float(np.abs(finite[np.isfinite(finite)]).max()), abs(p_bar), 1e-300)
    slack = 1e-12 * scale
    for delta in range(1, db + 1):
        for d in range(1, B + 1):
            l = int(best_l[delta, d])
            if current is not None and total[delta, d, l] >= h[delta, d] - slack:
                new.l[delta, d] = current.l[delta, d]
                new.b[delta, d] = current.b[delta, d]
                new.Z[delta, d] = current.Z[delta, d]
                continue
            new.l[delta, d] = l
            new.b[delta, d] = bhat[l]
            new.Z[delta, d] = waits[delta, d, l]
    return new


def bellman_residual(h: np.ndarray, p_bar: float, config: SourceConfig, model: SmdpModel | None = None) -> float:
    model = model or SmdpModel(config)
    total, _, _ = _improve_terms(model, h, p_bar)
    rhs = total[1:, 1:, 1:].min(axis=2)
    return float(np.max(np.abs(h[1:, 1:] - rhs)))


def initial_maps(config: SourceConfig) -> PolicyMaps:
    """Zero wait, length 1, position 0 everywhere."""
    shape = (config.delta_bound + 1, config.B + 1)
    return PolicyMaps(np.zeros(shape, dtype=np.int64), np.ones(shape, dtype=np.int64),
                      np.zeros(shape, dtype=np.int64))


def solve_tvfl(config: SourceConfig, gam: GammaTable | None = None, max_rounds: int = 1000,
               method: str = "direct") -> TvflPolicy:
    model = SmdpModel(config, gam)
    maps = initial_maps(config)
    history = []
    for _ in range(max_rounds):
        c, tau, P = model.stage(maps)
        maps, changed = _make_unichain(model, maps, c, tau, P)
        if changed:
            c, tau, P = model.stage(maps)
        if method == "direct":
            p_bar, h = _evaluate_direct(model, c, tau, P)
        else:
            p_bar, h = _evaluate_sweep(model, maps, c, tau, 1e-8, 100_000)
        history.append(p_bar)
        new = policy_improve(h, p_bar, config, model, current=maps)
        if new.same(maps):
            return TvflPolicy(maps.Z, maps.l, maps.b, h, p_bar, history)
        maps = new
    raise NotConverged(f"policy iteration did not stabilise within {max_rounds} rounds")


def wait_threshold(delta: int, d: int, l: int, p_bar: float, gam: GammaTable) -> int:
    """``Z_l(delta, d)``: first wait at which ``gamma_l(delta + Z, d) >= p_bar`` (see GammaTable.wait_times)."""
    return int(gam.wait_times(l, d, p_bar)[min(delta, gam.delta_bound)])


def tvfl_decide(state, policy: TvflPolicy) -> Action:
    return policy.action(state.delta, state.d)
