"""Reference policies: zero-wait, periodic updating into a FCFS queue, and maximum-age-first."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Action, SystemState


@dataclass(frozen=True)
class BaselineSpec:
    """``kind`` is ``zero_wait``, ``periodic`` or ``maf``; ``l = None`` stands for ``l = B``."""

    kind: str
    l: int | None = 1
    tp: int = 1

    def __post_init__(self):
        if self.kind not in ("zero_wait", "periodic", "maf"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.l is not None and self.l < 1:
            raise ValueError("feature length must be >= 1")
        if self.tp < 1:
            raise ValueError("period tp must be >= 1")

    def length(self, B: int) -> int:
        l = B if self.l is None else self.l
        if l > B:
            raise ValueError(f"baseline length l={l} exceeds buffer size B={B}")
        return l

    def label(self) -> str:
        l = "B" if self.l is None else str(self.l)
        if self.kind == "periodic":
            return f"periodic:tp={self.tp},l={l}"
        return f"{self.kind.replace('_', '-')}:l={l}"


def parse_baseline(text: str) -> BaselineSpec:
    """Parse ``zero-wait:l=1``, ``periodic:tp=4,l=1`` or ``maf:l=B``."""
    name, _, rest = text.strip().partition(":")
    kind = {"zero-wait": "zero_wait", "zero_wait": "zero_wait", "periodic": "periodic", "maf": "maf"}.get(name)
    if kind is None:
        raise ValueError(f"unknown baseline {name!r} in {text!r}")
    params = {}
    for tok in filter(None, rest.split(",")):
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError(f"bad parameter {tok!r} in {text!r}")
        params[k.strip()] = v.strip()
    unknown = set(params) - {"l", "tp"}
    if unknown:
        raise ValueError(f"unknown parameter(s) {sorted(unknown)} in {text!r}")
    l = params.get("l", "1")
    tp = int(params.get("tp", "1"))
    if kind == "periodic" and "tp" not in params:
        raise ValueError(f"periodic baseline needs tp=<slots>: {text!r}")
    return BaselineSpec(kind, None if l == "B" else int(l), tp)


def zero_wait_decide(state: SystemState, l: int = 1) -> Action:
    """Send a fresh feature of length ``l`` as soon as the channel is idle."""
    return Action(l=l, b=0, Z=0)


def periodic_decide(t: int, queue: list, tp: int, l: int = 1) -> Action | None:
    """At slots ``t = 0, tp, 2tp, ...`` generate a feature ``(l, 0)`` and append its time to ``queue``."""
    if t % tp == 0:
        queue.append(t)
        return Action(l=l, b=0, Z=0)
    return None


def maf_decide(deltas, N: int, l: int) -> np.ndarray:
    """Indices of the ``min(N // l, M)`` sources with the largest AoI (ties to the smaller index)."""
    deltas = np.asarray(deltas)
    k = min(N // l, deltas.size)
    order = np.argsort(-deltas, kind="stable")
    return np.sort(order[:k])
