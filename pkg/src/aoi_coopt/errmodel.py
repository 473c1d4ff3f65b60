"""Inference-error tables ``err(delta, l)``: analytic Jakes/MMSE generator, CSV I/O, synthetic builders."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, special

SPEED_OF_LIGHT = 299_792_458.0


class InferenceErrorTable:
    """``err[delta, l]`` for ``delta`` in 0..delta_bound and ``l`` in 1..B.

    Stored as an array of shape ``(delta_bound + 1, B + 1)`` whose column 0 is unused, so
    ``values[delta, l]`` reads naturally. Lookups beyond ``delta_bound`` clamp.
    """

    def __init__(self, values: np.ndarray):
        v = np.asarray(values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("error table must be a non-empty 2-D array (rows delta, columns l=1..B)")
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise ValueError(f"non-finite error value at delta={bad[0]}, l={bad[1] + 1}")
        full = np.zeros((v.shape[0], v.shape[1] + 1))
        full[:, 1:] = v
        full.setflags(write=False)
        self._v = full

    @property
    def B(self) -> int:
        return self._v.shape[1] - 1

    @property
    def delta_bound(self) -> int:
        return self._v.shape[0] - 1

    @property
    def values(self) -> np.ndarray:
        """Read-only ``(delta_bound + 1, B)`` matrix, column ``l - 1`` for length ``l``."""
        return self._v[:, 1:]

    @property
    def padded(self) -> np.ndarray:
        """Read-only ``(delta_bound + 1, B + 1)`` matrix indexed ``[delta, l]``."""
        return self._v

    def lookup(self, delta: int, l: int) -> float:
        if not 1 <= l <= self.B:
            raise ValueError(f"feature length {l} outside [1, {self.B}]")
        return float(self._v[min(max(delta, 0), self.delta_bound), l])

    def column(self, l: int, upto: int | None = None) -> np.ndarray:
        """``err(x, l)`` for ``x = 0..upto`` with clamping past ``delta_bound``."""
        upto = self.delta_bound if upto is None else upto
        idx = np.minimum(np.arange(upto + 1), self.delta_bound)
        return self._v[idx, l]

    def truncate(self, B: int) -> "InferenceErrorTable":
        if not 1 <= B <= self.B:
            raise ValueError(f"cannot truncate a B={self.B} table to B={B}")
        return InferenceErrorTable(self.values[:, :B])

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def max(self) -> float:
        return float(self.values.max())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InferenceErrorTable):
            return NotImplemented
        return self._v.shape == other._v.shape and bool(np.array_equal(self._v, other._v))

    def __repr__(self) -> str:
        return f"InferenceErrorTable(B={self.B}, delta_bound={self.delta_bound})"


@dataclass(frozen=True)
class JakesParams:
    """Clarke/Jakes fading process observed in white noise.

    b: process variance, fd: maximum Doppler shift [Hz], ts: sampling period [s],
    sigma2: observation-noise variance (floored at 1e-12 so the covariance stays SPD).
    """

    b: float = 1.0
    fd: float = 15.0 * 2e9 / SPEED_OF_LIGHT
    ts: float = 1e-3
    sigma2: float = 1e-6

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("process variance b must be positive")
        if not self.sigma2 >= 1e-12:
            raise ValueError("noise variance sigma2 must be >= 1e-12")
        if not self.fd >= 0:
            raise ValueError("Doppler shift fd must be non-negative")
        if not self.ts > 0:
            raise ValueError("sampling period ts must be positive")

    @classmethod
    def from_velocity(cls, v: float, fc: float, ts: float = 1e-3, b: float = 1.0,
                      sigma2: float = 1e-6, c: float = SPEED_OF_LIGHT) -> "JakesParams":
        return cls(b=b, fd=v * fc / c, ts=ts, sigma2=sigma2)


def bessel_j0(x):
    """Zeroth-order Bessel function of the first kind.

    Delegates to Cephes ``j0`` (rational approximation on [0, 5], Hankel asymptotic
    expansion beyond; peak absolute error about 4e-16).
    """
    return special.j0(x)


def jakes_autocorr(p: JakesParams, k) -> np.ndarray | float:
    """``r(k) = b * J0(2 pi fd ts |k|)``."""
    out = p.b * bessel_j0(2.0 * math.pi * p.fd * p.ts * np.abs(np.asarray(k, dtype=float)))
    return float(out) if np.ndim(out) == 0 else out


def jakes_error_table(p: JakesParams, B: int, delta_bound: int) -> InferenceErrorTable:
    """Linear-MMSE error of predicting ``H_t`` from ``(V_{t-delta}, ..., V_{t-delta-l+1})``.

    ``err(delta, l) = r(0) - c^T (R + sigma2 I)^{-1} c`` with ``c_i = r(delta + i)``.
    The leading ``l x l`` block of the Cholesky factor of the ``B x B`` matrix is the factor
    of the length-``l`` problem and forward substitution is causal, so one triangular solve
    per ``delta`` yields every ``l`` at once.
    """
    if B < 1 or delta_bound < 0:
        raise ValueError("need B >= 1 and delta_bound >= 0")
    lags = np.arange(B)
    R = linalg.toeplitz(jakes_autocorr(p, lags)) + p.sigma2 * np.eye(B)
    try:
        L = linalg.cholesky(R, lower=True)
    except linalg.LinAlgError as exc:
        # the failing leading minor is the first length that cannot be solved
        order = next(k for k in range(1, B + 1) if np.any(np.linalg.eigvalsh(R[:k, :k]) <= 0))
        raise ValueError(f"covariance not positive definite for l={order} (all delta)") from exc
    deltas = np.arange(delta_bound + 1)
    C = jakes_autocorr(p, deltas[:, None] + lags[None, :])  # (delta_bound+1, B)
    W = linalg.solve_triangular(L, C.T, lower=True).T
    err = p.b - np.cumsum(W * W, axis=1)
    if not np.all(np.isfinite(err)):
        bad = np.argwhere(~np.isfinite(err))[0]
        raise ValueError(f"MMSE solve failed at delta={bad[0]}, l={bad[1] + 1}")
    # rounding can push the tiniest errors a hair below zero
    return InferenceErrorTable(np.maximum(err, 0.0))


def synthetic_table(kind: str, B: int, delta_bound: int, value=None) -> InferenceErrorTable:
    """``constant`` (value=c), ``linear`` (value=slope, err = slope*delta) or ``custom`` (value=matrix)."""
    if B < 1 or delta_bound < 0:
        raise ValueError("need B >= 1 and delta_bound >= 0")
    shape = (delta_bound + 1, B)
    if kind == "constant":
        return InferenceErrorTable(np.full(shape, float(value)))
    if kind == "linear":
        col = float(value) * np.arange(delta_bound + 1, dtype=float)
        return InferenceErrorTable(np.repeat(col[:, None], B, axis=1))
    if kind == "custom":
        m = np.asarray(value, dtype=float)
        if m.shape != shape:
            raise ValueError(f"custom matrix has shape {m.shape}, expected {shape}")
        return InferenceErrorTable(m)
    raise ValueError(f"unknown table kind {kind!r}")


def save_csv(table: InferenceErrorTable, path, comments: Sequence[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(f"# delta_bound={table.delta_bound}")
    lines.append(",".join(["delta"] + [f"l={l}" for l in range(1, table.B + 1)]))
    for delta, row in enumerate(table.values):
        lines.append(",".join([str(delta)] + [format(float(v), ".17g") for v in row]))
    text = "\n".join(lines) + "\n"
    if str(path) == "-":
        import sys

        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _meta(comment: str) -> dict[str, str]:
    out = {}
    for tok in comment.lstrip("#").replace(",", " ").split():
        k, sep, v = tok.partition("=")
        if sep:
            out[k.strip()] = v.strip()
    return out


def load_csv(path) -> InferenceErrorTable:
    lines = Path(path).read_text().splitlines()
    meta: dict[str, str] = {}
    i = 0
    while i < len(lines) and (lines[i].startswith("#") or not lines[i].strip()):
        meta.update(_meta(lines[i]))
        i += 1
    if i == len(lines):
        raise ValueError(f"{path}: missing header line")
    header = [h.strip() for h in lines[i].split(",")]
    if header[0] != "delta" or len(header) < 2:
        raise ValueError(f"{path}: line {i + 1}: header must start with 'delta,l=1'")
    for col, h in enumerate(header[1:], start=1):
        if h != f"l={col}":
            raise ValueError(f"{path}: line {i + 1}, column {col + 1}: expected 'l={col}', got {h!r}")
    B = len(header) - 1
    rows = []
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != B + 1:
            raise ValueError(f"{path}: line {lineno}: expected {B + 1} cells, got {len(cells)}")
        try:
            delta = int(cells[0])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}, column 1: non-integer delta {cells[0]!r}") from None
        if delta != len(rows):
            raise ValueError(f"{path}: line {lineno}: delta rows must run 0,1,2,...; got {delta}")
        row = []
        for col, cell in enumerate(cells[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(f"{path}: line {lineno}, column {col}: non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: line {lineno}, column {col}: non-finite value {cell!r}")
            row.append(v)
        rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if "delta_bound" in meta and int(meta["delta_bound"]) != len(rows) - 1:
        raise ValueError(
            f"{path}: metadata promises delta_bound={meta['delta_bound']} but file has "
            f"{len(rows)} rows (delta_bound={len(rows) - 1})"
        )
    if "B" in meta and int(meta["B"]) != B:
        raise ValueError(f"{path}: metadata promises B={meta['B']} but header has {B} lengths")
    return InferenceErrorTable(np.array(rows))
