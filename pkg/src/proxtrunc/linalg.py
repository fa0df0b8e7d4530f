"""Pseudo-inverse and the backward-in-time additive estimating-equation solver.

The solver is shared by the bridge-process fit and the reverse-time CDF fit.
Starting from ``B = 0`` at ``tau_q`` it walks the distinct entry times
downward; at each entry time ``t``

    M(t) = sum_{i: q_i <= t < x_i} w_i(t) exp(r_i . B(t+)) v_i r_i^T
    J(t) = sum_{i: q_i == t}       w_i(t) exp(r_i . B(t+)) v_i
    B(t) = B(t+) + M(t)^+ J(t)

where ``r_i`` are the regressors and ``v_i`` the instruments (both with a
leading 1).  The common ``1/n`` factor cancels and is omitted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from proxtrunc.errors import (
    FLAG_CENSOR_FLOOR,
    FLAG_EMPTY_RISK_SET,
    FLAG_EXP_CLAMP,
    FLAG_RANK_DEFICIENT,
    DimensionMismatch,
    NonFiniteInput,
)
from proxtrunc.survival import RIGHT, StepFunction

REL_TOL = 1e-8
ETA_CLAMP = 50.0
CENSOR_FLOOR = 1e-10


def pseudo_inverse(a, rel_tol: float = REL_TOL) -> np.ndarray:
    """Moore-Penrose inverse via SVD.

    Singular values below ``rel_tol`` times the largest one are treated as zero.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch("pseudo_inverse expects a 2-D array")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput("matrix has non-finite entries")
    if a.size == 0:
        return np.zeros(a.T.shape)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    smax = s[0] if s.size else 0.0
    if smax == 0.0:
        return np.zeros(a.T.shape)
    inv = np.where(s > rel_tol * smax, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


@dataclass(frozen=True, eq=False)
class CoefficientPath:
    """Left-continuous vector step function with ``B(t) = 0`` for ``t >= tau_q``.

    ``values[k]`` holds ``B`` on ``(knots[k-1], knots[k]]`` (on ``[0, knots[0]]``
    for ``k = 0``); above the last knot and from ``tau_q`` on the path is zero.
    """

    knots: np.ndarray
    values: np.ndarray
    tau_q: float
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != knots.size:
            raise DimensionMismatch("values must have one row per knot")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "flags", frozenset(self.flags))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left")
        padded = np.vstack([self.values, np.zeros((1, self.dim))])
        out = padded[idx]
        out[t >= self.tau_q] = 0.0
        return out

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"coeff_{j + 1}" for j in range(self.dim)])
            for t, row in zip(self.knots, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class RecursionInput:
    """Per-record inputs of the backward solver.

    The time-varying weight is ``w_i(t) = base_weights[i] / S(t - q_i)`` when a
    censoring curve ``S`` is supplied, else ``base_weights[i]``; it is always
    multiplied by the risk indicator ``q_i <= t < x_i``.
    """

    q: np.ndarray
    x: np.ndarray
    regressors: np.ndarray
    instruments: np.ndarray
    base_weights: np.ndarray
    censor_curve: StepFunction | None = None
    floor: float = CENSOR_FLOOR

    def __post_init__(self):
        n = np.asarray(self.q).shape[0]
        for name in ("q", "x", "base_weights"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DimensionMismatch(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, arr)
        for name in ("regressors", "instruments"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionMismatch(f"{name} must have shape ({n}, k)")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if self.censor_curve is not None and self.censor_curve.continuity != RIGHT:
            raise ValueError("censoring curve must be right-continuous")

    @classmethod
    def with_intercepts(cls, q, x, regressors, instruments, base_weights, censor_curve=None, floor=CENSOR_FLOOR):
        n = np.asarray(q).shape[0]
        ones = np.ones((n, 1))
        r = np.hstack([ones, np.asarray(regressors, dtype=float).reshape(n, -1)])
        v = np.hstack([ones, np.asarray(instruments, dtype=float).reshape(n, -1)])
        return cls(q, x, r, v, base_weights, censor_curve, floor)

    def weights_at(self, t: float) -> np.ndarray:
        """Literal ``w_i(t)`` for all records, zero outside the risk set."""
        at_risk = (self.q <= t) & (t < self.x)
        w = self.base_weights.copy()
        if self.censor_curve is not None:
            s = np.asarray(self.censor_curve(np.maximum(t - self.q, 0.0)), dtype=float)
            w = w / np.maximum(s, self.floor)
        return np.where(at_risk, w, 0.0)


@njit(cache=True)
def _curve_at(knots, vals, before, s):
    lo = 0
    hi = knots.shape[0]
    while lo < hi:  # first index with knots[idx] > s
        mid = (lo + hi) // 2
        if knots[mid] <= s:
            lo = mid + 1
        else:
            hi = mid
    if lo == 0:
        return before
    return vals[lo - 1]


@njit(cache=True)
def _pinv_solve(m, j, rel_tol):
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    p = vt.shape[1]
    out = np.zeros(p)
    truncated = False
    if s.shape[0] == 0 or s[0] == 0.0:
        return out, True
    uj = u.T @ j
    for k in range(s.shape[0]):
        if s[k] > rel_tol * s[0]:
            out += vt[k] * (uj[k] / s[k])
        else:
            truncated = True
    return out, truncated


@njit(cache=True)
def _backward_kernel(q, x, r, v, a, use_curve, cknots, cvals, cbefore, floor, rel_tol, clamp):
    n = q.shape[0]
    p = r.shape[1]
    m = v.shape[1]
    order = np.argsort(q, kind="mergesort")
    qs = q[order]
    # distinct entry times
    nk = 0
    times = np.empty(n)
    for k in range(n):
        if k == 0 or qs[k] != qs[k - 1]:
            times[nk] = qs[k]
            nk += 1
    times = times[:nk]
    coeffs = np.zeros((nk, p))
    flags = np.zeros(4, dtype=np.int64)  # empty, floor, clamp, rank
    b = np.zeros(p)
    end = n
    for kk in range(nk - 1, -1, -1):
        t = times[kk]
        while end > 0 and qs[end - 1] > t:
            end -= 1
        mm = np.zeros((m, p))
        jj = np.zeros(m)
        tot = 0.0
        has_jump = False
        for pos in range(end):
            i = order[pos]
            if x[i] <= t:
                continue
            w = a[i]
            if w == 0.0:
                continue
            if use_curve:
                sv = _curve_at(cknots, cvals, cbefore, t - q[i])
                if sv < floor:
                    sv = floor
                    flags[1] = 1
                w = w / sv
            eta = 0.0
            for c in range(p):
                eta += r[i, c] * b[c]
            if eta > clamp:
                eta = clamp
                flags[2] = 1
            elif eta < -clamp:
                eta = -clamp
                flags[2] = 1
            we = w * np.exp(eta)
            tot += we
            for row in range(m):
                f = we * v[i, row]
                for c in range(p):
                    mm[row, c] += f * r[i, c]
            if q[i] == t:
                has_jump = True
                for row in range(m):
                    jj[row] += we * v[i, row]
        if tot == 0.0:
            flags[0] = 1
        elif has_jump:
            db, trunc = _pinv_solve(mm, jj, rel_tol)
            if trunc:
                flags[3] = 1
            b = b + db
        coeffs[kk] = b
    return times, coeffs, flags


_FLAG_NAMES = (FLAG_EMPTY_RISK_SET, FLAG_CENSOR_FLOOR, FLAG_EXP_CLAMP, FLAG_RANK_DEFICIENT)


def backward_additive_fit(inp: RecursionInput, tau_q: float, rel_tol: float = REL_TOL) -> CoefficientPath:
    """Solve the additive estimating equations backward from ``tau_q``.

    Tied entry times are aggregated into a single update.  Rank-deficient
    systems are handled by the pseudo-inverse and flagged; exponent overflow
    is prevented by clamping the linear predictor to ``[-50, 50]``.
    """
    if np.any(inp.q > tau_q):
        raise ValueError("entry times must not exceed tau_q")
    if inp.censor_curve is not None:
        curve = inp.censor_curve
        cknots, cvals, cbefore = curve.knots, curve.values, float(curve.value_before_first)
    else:
        cknots, cvals, cbefore = np.zeros(0), np.zeros(0), 1.0
    times, coeffs, flags = _backward_kernel(
        inp.q, inp.x, inp.regressors, inp.instruments, inp.base_weights,
        inp.censor_curve is not None, cknots, cvals, cbefore,
        float(inp.floor), float(rel_tol), ETA_CLAMP,
    )
    names = {name for name, hit in zip(_FLAG_NAMES, flags) if hit}
    return CoefficientPath(times, coeffs, float(tau_q), names)
