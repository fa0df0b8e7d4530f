"""Step functions and classical survival estimators.

Kaplan-Meier for the residual censoring time, the truncation-adjusted
product-limit estimator, Kaplan-Meier ignoring truncation, the naive mean,
and the conditional Kendall's tau test of quasi-independence.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from proxtrunc.data import Dataset, EstimandSpec
from proxtrunc.errors import (
    FLAG_EMPTY_RISK_SET,
    AllWeightsZero,
    DataError,
    NoComparablePairs,
)

RIGHT = "RIGHT"
LEFT = "LEFT"


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Piecewise-constant function of time.

    ``values[k]`` is the value just after ``knots[k]``.  With ``RIGHT``
    continuity the value at a knot is the post-jump value; with ``LEFT`` it is
    the pre-jump value.
    """

    knots: np.ndarray
    values: np.ndarray
    value_before_first: float = 1.0
    continuity: str = RIGHT
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have equal length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if self.continuity not in (RIGHT, LEFT):
            raise ValueError(f"continuity must be RIGHT or LEFT, got {self.continuity!r}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "flags", frozenset(self.flags))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        side = "right" if self.continuity == RIGHT else "left"
        idx = np.searchsorted(self.knots, t, side=side) - 1
        padded = np.concatenate(([self.value_before_first], self.values))
        out = padded[idx + 1]
        return float(out) if out.ndim == 0 else out

    def integrate(self, a: float, b: float) -> float:
        """Integral over ``[a, b]``."""
        if b <= a:
            return 0.0
        inner = self.knots[(self.knots > a) & (self.knots < b)]
        pts = np.concatenate(([a], inner, [b]))
        mids = 0.5 * (pts[:-1] + pts[1:])
        return float(np.sum(self(mids) * np.diff(pts)))

    def to_csv(self, path, header=("time", "value")) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, v in zip(self.knots, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


def _weights(dataset: Dataset, case_weights) -> np.ndarray:
    if case_weights is None:
        return np.ones(dataset.n)
    w = np.asarray(case_weights, dtype=float)
    if w.shape != (dataset.n,):
        raise DataError(f"case weights have shape {w.shape}, expected ({dataset.n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DataError("case weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise AllWeightsZero("all case weights are zero")
    return w


def weighted_kaplan_meier(times, events, weights=None) -> StepFunction:
    """Right-continuous weighted Kaplan-Meier curve.

    At tied times, events are removed before censorings, i.e. subjects
    censored at ``t`` are still at risk for events at ``t``.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    w = np.ones(times.shape) if weights is None else np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise AllWeightsZero("all case weights are zero")
    uniq, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=w * events, minlength=uniq.size)
    tot = np.bincount(inv, weights=w, minlength=uniq.size)
    at_risk = np.cumsum(tot[::-1])[::-1]
    keep = d > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = np.where(at_risk[keep] > 0, 1.0 - d[keep] / at_risk[keep], 1.0)
    return StepFunction(uniq[keep], np.clip(np.cumprod(factors), 0.0, 1.0), 1.0, RIGHT)


def km_residual_survival(dataset: Dataset, case_weights=None) -> StepFunction:
    """Kaplan-Meier estimate of ``S_D(t) = P(D > t)`` on the residual scale.

    The residual censoring time ``D = C - Q`` is observed when the subject is
    censored, so the event indicator on this scale is ``1 - delta``.
    """
    w = _weights(dataset, case_weights)
    return weighted_kaplan_meier(dataset.x - dataset.q, dataset.delta == 0, w)


def product_limit_truncation(dataset: Dataset, case_weights=None) -> StepFunction:
    """Product-limit estimator under random left truncation and right censoring.

    Risk set at ``t`` is ``{i: q_i <= t <= x_i}``.  The curve is conditional on
    survival to ``min q``.  Event times whose weighted risk set is empty are
    skipped and flagged.
    """
    w = _weights(dataset, case_weights)
    q, x = dataset.q, dataset.x
    ev = dataset.delta == 1
    uniq, inv = np.unique(x[ev], return_inverse=True)
    d = np.bincount(inv, weights=w[ev], minlength=uniq.size)

    # weighted counts via sorted cumulative sums: #{q <= t} - #{x < t}
    oq = np.argsort(q, kind="stable")
    ox = np.argsort(x, kind="stable")
    cq = np.concatenate(([0.0], np.cumsum(w[oq])))
    cx = np.concatenate(([0.0], np.cumsum(w[ox])))
    entered = cq[np.searchsorted(q[oq], uniq, side="right")]
    left = cx[np.searchsorted(x[ox], uniq, side="left")]
    at_risk = entered - left

    flags = set()
    factors = np.ones(uniq.size)
    ok = at_risk > 1e-12 * w.sum()
    if not np.all(ok):
        flags.add(FLAG_EMPTY_RISK_SET)
    factors[ok] = 1.0 - d[ok] / at_risk[ok]
    keep = d > 0
    return StepFunction(
        uniq[keep], np.clip(np.cumprod(factors)[keep], 0.0, 1.0), 1.0, RIGHT, flags=flags
    )


def km_ignore_truncation(dataset: Dataset, case_weights=None) -> StepFunction:
    """Standard Kaplan-Meier on ``(x, delta)``, ignoring the entry times."""
    w = _weights(dataset, case_weights)
    return weighted_kaplan_meier(dataset.x, dataset.delta == 1, w)


def naive_mean(dataset: Dataset, nu: EstimandSpec, case_weights=None) -> float:
    """Weighted average of ``nu(x_i)``; ignores truncation and censoring."""
    w = _weights(dataset, case_weights)
    return float(np.sum(w * nu.nu(dataset.x)) / w.sum())


@dataclass(frozen=True)
class KendallResult:
    tau_c: float
    n_comparable: int
    z_score: float
    p_value: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _comparable_pairs_stat(q, x, delta):
    """Sum of concordance signs and count over comparable pairs.

    Pair ``(i, j)`` with ``x_i < x_j`` is comparable when subject ``i`` is
    uncensored and ``q_j <= x_i`` (both at risk at ``x_i``).  For each
    uncensored ``i`` the comparable partners are exactly the later members of
    its risk set, which also gives the permutation variance: under
    quasi-independence the rank of ``q_i`` within the risk set is uniform, so
    its sign-sum has variance ``(r_i^2 - 1) / 3``.
    """
    order = np.argsort(x, kind="stable")
    q, x, delta = q[order], x[order], delta[order]
    k_sum = 0.0
    n_pairs = 0
    var = 0.0
    for i in np.flatnonzero(delta == 1):
        later = x > x[i]
        partners = later & (q <= x[i])
        m = int(partners.sum())
        if m == 0:
            continue
        k_sum += float(np.sign(q[partners] - q[i]).sum())
        n_pairs += m
        r = m + 1
        var += (r * r - 1) / 3.0
    return k_sum, n_pairs, var


def kendall_tau_test(dataset: Dataset) -> KendallResult:
    """Conditional Kendall's tau test for quasi-independence of entry and event times.

    Uses the comparable-pair statistic for truncated data with censored pairs
    entering only when the ordering is unambiguous; two-sided normal p-value.
    """
    if dataset.n < 2:
        raise DataError("need at least two records")
    k_sum, n_pairs, var = _comparable_pairs_stat(dataset.q, dataset.x, dataset.delta)
    if n_pairs == 0:
        raise NoComparablePairs("no comparable pairs")
    tau = k_sum / n_pairs
    z = k_sum / math.sqrt(var) if var > 0 else 0.0
    p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return KendallResult(tau_c=float(tau), n_comparable=int(n_pairs), z_score=float(z), p_value=p)
