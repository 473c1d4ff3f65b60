"""Optimal policy with a time-invariant feature length.

For every legal ``(b, l)`` the threshold policy's long-run average ``beta_{b,l}`` is the root of
``f(beta) = E[cycle cost] - beta * E[cycle length]``; the policy keeps the ``(b, l)`` with the
smallest root and, at run time, transmits once ``gamma_l(AoI, l) >= beta``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Action, SourceConfig
from .index import CycleCosts, GammaTable, _tie_slack


class RootNotBracketed(ValueError):
    pass


@dataclass
class TiflPolicy:
    l_star: int
    b_star: int
    beta_star: float
    beta_grid: np.ndarray  # [b, l], NaN where illegal
    gamma: GammaTable = field(repr=False)
    waits: np.ndarray = field(repr=False)  # Z for each delivered AoI 0..delta_bound

    @property
    def delta_bound(self) -> int:
        return self.gamma.delta_bound

    def action(self, delta: int, d: int | None = None) -> Action:
        """Wait-then-send decision at a delivery epoch with AoI ``delta``."""
        return Action(self.l_star, self.b_star, int(self.waits[min(delta, self.delta_bound)]))

    def to_json(self) -> dict:
        grid = [[None if math.isnan(v) else float(v) for v in row] for row in self.beta_grid]
        return {"l_star": self.l_star, "b_star": self.b_star, "beta_star": self.beta_star, "beta_grid": grid}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj: dict, config: SourceConfig) -> "TiflPolicy":
        """Rebuild a policy for ``config``; the index table and waits are recomputed."""
        gam = GammaTable(config.table, config.trans)
        l, b, beta = int(obj["l_star"]), int(obj["b_star"]), float(obj["beta_star"])
        grid = np.array([[np.nan if v is None else v for v in row] for row in obj["beta_grid"]], dtype=float)
        if grid.shape != (config.B, config.B + 1):
            raise ValueError(f"beta_grid shape {grid.shape} does not match B={config.B}")
        return cls(l, b, beta, grid, gam, gam.wait_times(l, l, beta))


class _Kernel:
    def __init__(self, config: SourceConfig, gam: GammaTable | None = None):
        self.config = config
        self.gamma = gam if gam is not None else GammaTable(config.table, config.trans)
        self.costs = CycleCosts(config.table, config.trans)


def cycle_stats(beta: float, b: int, l: int, config: SourceConfig, gam: GammaTable | None = None,
                _kernel: _Kernel | None = None) -> tuple[float, float]:
    """Expected cost and length of one delivery-to-delivery cycle of the threshold-``beta`` policy."""
    k = _kernel or _Kernel(config, gam)
    trans = config.trans
    waits = k.gamma.wait_times(l, l, beta)
    db = config.delta_bound
    cost = length = 0.0
    for t0, p0 in zip(trans.support(l), trans.probs(l)):
        delta0 = min(int(t0) + b, db)
        c, n = k.costs.cycle(l, l, delta0, waits[delta0])
        cost += p0 * float(c)
        length += p0 * float(n)
    return cost, length


def solve_beta(b: int, l: int, config: SourceConfig, gam: GammaTable | None = None,
               _kernel: _Kernel | None = None, ftol: float = 1e-9, xtol: float = 1e-12) -> float:
    """Bisection for the root of ``f(beta) = cost(beta) - beta * length(beta)``.

    Tolerances are relative to the table's magnitude. The bracket end point is then refined by
    fixed-point steps ``beta <- cost/length`` of the induced policy, which stop at the exact
    average of the policy that will be run.
    """
    k = _kernel or _Kernel(config, gam)
    table = config.table
    lo, hi = table.min, table.max
    scale = max(abs(lo), abs(hi), 1e-300)

    def f(beta):
        c, n = cycle_stats(beta, b, l, config, _kernel=k)
        return c - beta * n

    f_lo, f_hi = f(lo), f(hi)
    if f_lo < -ftol * scale or f_hi > ftol * scale:
        raise RootNotBracketed(f"(b={b}, l={l}): f({lo})={f_lo:.3g}, f({hi})={f_hi:.3g}; no sign change")
    if abs(f_lo) <= ftol * scale:
        hi = lo
    while hi - lo > xtol * scale:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= ftol * scale:
            lo = hi = mid
            break
        if fm > 0:
            lo = mid
        else:
            hi = mid
    # snap to the exact average of the induced threshold policy, then descend while it improves
    c, n = cycle_stats(hi, b, l, config, _kernel=k)
    beta = c / n
    for _ in range(50):
        c, n = cycle_stats(beta, b, l, config, _kernel=k)
        ratio = c / n
        if not ratio < beta:
            break
        beta = ratio
    return float(beta)


def solve_tifl(config: SourceConfig, gam: GammaTable | None = None) -> TiflPolicy:
    k = _Kernel(config, gam)
    B = config.B
    grid = np.full((B, B + 1), np.nan)
    best = None
    for l in range(1, B + 1):
        for b in range(0, B - l + 1):
            beta = solve_beta(b, l, config, _kernel=k)
            grid[b, l] = beta
            # improvement beyond rounding noise keeps the (smaller l, smaller b) tie-break
            if best is None or beta < best[0] - _tie_slack(best[0]):
                best = (beta, l, b)
    beta, l, b = best
    waits = k.gamma.wait_times(l, l, beta)
    return TiflPolicy(l_star=l, b_star=b, beta_star=float(beta), beta_grid=grid, gamma=k.gamma, waits=waits)


def tifl_decide(delta: int, policy: TiflPolicy) -> bool:
    """True when a feature should be sent now (channel idle, current AoI ``delta``).

    Transmits iff ``gamma_{l*}(delta, l*) >= beta*``; ties transmit. Past ``delta_bound`` the
    index is constant, so the AoI bound also forces a send.
    """
    if delta >= policy.delta_bound:
        return True
    g = policy.gamma(policy.l_star, delta, policy.l_star)
    return g >= policy.beta_star - _tie_slack(policy.beta_star)
