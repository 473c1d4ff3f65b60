"""Shared domain types: system state, actions, AoI dynamics and transmission-time models."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

SINGLE = "single"
MULTI = "multi"


@dataclass(frozen=True)
class SystemState:
    """AoI ``delta`` and length ``d`` of the most recently delivered feature."""

    delta: int
    d: int


@dataclass(frozen=True)
class Action:
    """Wait ``Z`` slots, then send a feature of length ``l`` taken at buffer position ``b``.

    In the multi-source model ``Z`` is unused and ``l == 0`` means idle.
    """

    l: int
    b: int = 0
    Z: int = 0


def validate_action(a: Action, B: int, mode: str = SINGLE) -> str | None:
    """Return ``None`` if the action is legal, else a short description of the violation."""
    if mode == SINGLE:
        if a.Z < 0:
            return f"wait Z={a.Z} is negative"
        if not 1 <= a.l <= B:
            return f"feature length l={a.l} outside [1, {B}]"
        if not 0 <= a.b <= B - a.l:
            return f"feature position b={a.b} outside [0, {B - a.l}] for l={a.l}"
        return None
    if mode == MULTI:
        if a.l < 0:
            return f"feature length l={a.l} is negative"
        if a.b < 0:
            return f"feature position b={a.b} is negative"
        if a.l + a.b > B:
            return f"l+b={a.l + a.b} exceeds buffer size {B}"
        return None
    raise ValueError(f"unknown mode {mode!r}")


def aoi_after_delivery(T: int, b: int, mode: str = SINGLE) -> int:
    """AoI in the delivery slot: ``T + b`` single-source, ``1 + b`` multi-source."""
    if mode == MULTI:
        return 1 + b
    return T + b


def aoi_step(state: SystemState) -> SystemState:
    return SystemState(state.delta + 1, state.d)


class TransmissionModel:
    """Finite-support distribution of the transmission time ``T(l)`` for each length ``l``.

    ``dists[l - 1]`` is a pair ``(support, probs)``; support points are integers >= 1.
    Instances are immutable after construction.
    """

    def __init__(self, dists: Sequence[tuple[Sequence[int], Sequence[float]]], label: str | None = None):
        if len(dists) == 0:
            raise ValueError("transmission model needs at least one length")
        sup_list, prob_list = [], []
        for l, (sup, pr) in enumerate(dists, start=1):
            sup = np.asarray(sup, dtype=np.int64)
            pr = np.asarray(pr, dtype=float)
            if sup.ndim != 1 or sup.shape != pr.shape or sup.size == 0:
                raise ValueError(f"length {l}: support and probabilities must be equal-length 1-D")
            if np.any(sup < 1):
                raise ValueError(f"length {l}: transmission times must be >= 1")
            if np.any(pr < 0) or abs(pr.sum() - 1.0) > 1e-12:
                raise ValueError(f"length {l}: probabilities must be non-negative and sum to 1")
            if np.unique(sup).size != sup.size:
                raise ValueError(f"length {l}: duplicate support points")
            order = np.argsort(sup)
            sup, pr = sup[order], pr[order]
            sup.setflags(write=False)
            pr.setflags(write=False)
            sup_list.append(sup)
            prob_list.append(pr)
        self._support = tuple(sup_list)
        self._probs = tuple(prob_list)
        self._cdf = []
        for pr in self._probs:
            c = np.cumsum(pr)
            c[-1] = 1.0
            c.setflags(write=False)
            self._cdf.append(c)
        self._cdf = tuple(self._cdf)
        self.label = label

    @classmethod
    def det(cls, alpha: float, B: int) -> "TransmissionModel":
        """Deterministic ``T(l) = ceil(alpha * l)`` (at least one slot)."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        # round first so that e.g. 0.3 * 10 does not become 4 slots
        times = [max(1, math.ceil(round(alpha * l, 9))) for l in range(1, B + 1)]
        return cls([([t], [1.0]) for t in times], label=f"det:alpha={alpha!r}")

    @classmethod
    def constant(cls, T: int, B: int) -> "TransmissionModel":
        return cls([([T], [1.0]) for _ in range(B)], label=f"const:T={T}")

    @property
    def B(self) -> int:
        return len(self._support)

    def support(self, l: int) -> np.ndarray:
        self._check(l)
        return self._support[l - 1]

    def probs(self, l: int) -> np.ndarray:
        self._check(l)
        return self._probs[l - 1]

    def cdf(self, l: int) -> np.ndarray:
        self._check(l)
        return self._cdf[l - 1]

    def mean(self, l: int) -> float:
        self._check(l)
        return float(np.dot(self._support[l - 1], self._probs[l - 1]))

    @property
    def max_support(self) -> int:
        return int(max(s[-1] for s in self._support))

    @property
    def is_deterministic(self) -> bool:
        return all(s.size == 1 for s in self._support)

    def truncate(self, B: int) -> "TransmissionModel":
        if B > self.B:
            raise ValueError(f"cannot extend a model with B={self.B} to B={B}")
        return TransmissionModel(list(zip(self._support[:B], self._probs[:B])), label=self.label)

    def draw(self, l: int, u: float) -> int:
        """Inverse-CDF draw from a uniform ``u`` in [0, 1)."""
        k = int(np.searchsorted(self._cdf[l - 1], u, side="right"))
        return int(self._support[l - 1][min(k, self._support[l - 1].size - 1)])

    def _check(self, l: int) -> None:
        if not 1 <= l <= len(self._support):
            raise ValueError(f"feature length {l} outside [1, {len(self._support)}]")

    def to_text(self) -> str:
        if self.label and self.label.startswith("det:"):
            return self.label
        payload = {
            str(l): [[int(t), float(p)] for t, p in zip(s, pr)]
            for l, (s, pr) in enumerate(zip(self._support, self._probs), start=1)
        }
        return "table:" + json.dumps(payload)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransmissionModel) or other.B != self.B:
            return NotImplemented
        return all(
            np.array_equal(a, b) and np.array_equal(p, q)
            for a, b, p, q in zip(self._support, other._support, self._probs, other._probs)
        )

    def __repr__(self) -> str:
        return f"TransmissionModel({self.label or 'table'}, B={self.B})"


def transmission_mean(model: TransmissionModel, l: int) -> float:
    return model.mean(l)


def parse_transmission(text: str, B: int) -> TransmissionModel:
    """Parse ``det:alpha=<float>`` or ``table:{"1": [[t, p], ...], ...}``."""
    text = text.strip()
    if text.startswith("det:"):
        key, _, val = text[4:].partition("=")
        if key.strip() != "alpha" or not val:
            raise ValueError(f"expected det:alpha=<float>, got {text!r}")
        return TransmissionModel.det(float(val), B)
    if text.startswith("table:"):
        raw: Mapping[str, list] = json.loads(text[6:])
        dists = []
        for l in range(1, B + 1):
            if str(l) not in raw:
                raise ValueError(f"transmission table has no entry for length {l}")
            pairs = raw[str(l)]
            dists.append(([int(t) for t, _ in pairs], [float(p) for _, p in pairs]))
        return TransmissionModel(dists)
    raise ValueError(f"unrecognised transmission model {text!r}")


@dataclass(frozen=True)
class SourceConfig:
    """A single source: error table (which fixes ``B`` and ``delta_bound``) plus transmission model."""

    table: "InferenceErrorTable"  # noqa: F821  (errmodel imports core)
    trans: TransmissionModel

    def __post_init__(self):
        if self.trans.B < self.table.B:
            raise ValueError(f"transmission model covers {self.trans.B} lengths, table needs {self.table.B}")
        if self.trans.B > self.table.B:
            object.__setattr__(self, "trans", self.trans.truncate(self.table.B))
        need = self.table.B + self.trans.max_support
        if self.table.delta_bound < need:
            raise ValueError(
                f"delta_bound={self.table.delta_bound} too small: need >= B + max T = {need}"
            )

    @property
    def B(self) -> int:
        return self.table.B

    @property
    def delta_bound(self) -> int:
        return self.table.delta_bound
