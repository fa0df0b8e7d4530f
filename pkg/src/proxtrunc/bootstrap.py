"""Multiplier bootstrap with normalized exponential weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from proxtrunc.data import Dataset, EstimandSpec
from proxtrunc.errors import EstimationError, TooManyFailures
from proxtrunc.estimators import TruthOracle, canonical_method, estimate_many

MAX_FAILURE_FRACTION = 0.2


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 200
    seed: int = 0
    ci_level: float = 0.95
    stream: tuple[int, ...] = (1,)

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("need at least 2 bootstrap replications")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass(frozen=True)
class BootstrapResult:
    method: str
    replicates: np.ndarray
    n_failed: int
    se: float
    ci_low: float
    ci_high: float
    ok: bool = True
    errors: tuple[str, ...] = field(default_factory=tuple)


def replicate_rng(seed: int, stream: Sequence[int], r: int) -> np.random.Generator:
    """Counter-based generator for replicate ``r``; independent of execution order."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream) + (r,))
    return np.random.Generator(np.random.Philox(ss))


def draw_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Multipliers ``e_i / sum_j e_j`` with ``e_i ~ Exp(1)`` by inverse CDF."""
    e = -np.log1p(-rng.random(n))
    return e / e.sum()


def wald_interval(theta, se, ci_level: float = 0.95, z: float | None = None):
    if z is None:
        z = norm.ppf(0.5 + ci_level / 2)
    theta = np.asarray(theta, dtype=float)
    se = np.asarray(se, dtype=float)
    return theta - z * se, theta + z * se


def bootstrap_estimate(dataset: Dataset, nu: EstimandSpec, methods: Sequence[str], config: BootstrapConfig,
                       oracle: TruthOracle | None = None, point: dict | None = None,
                       weight_sampler: Callable[[int, np.random.Generator], np.ndarray] = draw_weights,
                       raise_on_failure: bool = True) -> dict:
    """Bootstrap standard errors and Wald intervals for each method.

    Every replicate refits all nuisance quantities with the same multipliers
    (the entry-time bound stays fixed).  Failed replicates are dropped and
    counted; more than 20% failures raises ``TooManyFailures`` unless
    ``raise_on_failure`` is false, in which case the result has ``ok=False``.
    """
    methods = [canonical_method(m) for m in methods]
    if point is None:
        point = estimate_many(dataset, nu, methods, oracle=oracle)
    reps = {m: [] for m in methods}
    errors = {m: [] for m in methods}
    for r in range(config.replications):
        w = weight_sampler(dataset.n, replicate_rng(config.seed, config.stream, r))
        try:
            res = estimate_many(dataset, nu, methods, case_weights=w, oracle=oracle,
                                on_error=lambda m, e: errors[m].append(type(e).__name__))
        except EstimationError as exc:  # shared censoring fit failed
            for m in methods:
                errors[m].append(type(exc).__name__)
            continue
        for m, est in res.items():
            reps[m].append(est.theta_hat)

    z = norm.ppf(0.5 + config.ci_level / 2)
    out = {}
    for m in methods:
        vals = np.asarray(reps[m], dtype=float)
        n_failed = config.replications - vals.size
        ok = n_failed <= MAX_FAILURE_FRACTION * config.replications and vals.size >= 2
        if not ok and raise_on_failure:
            raise TooManyFailures(f"{m}: {n_failed} of {config.replications} bootstrap replicates failed")
        se = float(vals.std(ddof=1)) if vals.size >= 2 else math.nan
        theta = point[m].theta_hat if m in point else math.nan
        lo, hi = wald_interval(theta, se, z=z)
        out[m] = BootstrapResult(m, vals, n_failed, se, float(lo), float(hi), ok, tuple(errors[m]))
    return out


def attach_inference(point: dict, boot: dict) -> dict:
    """Return copies of the point estimates carrying bootstrap SE and CI."""
    out = {}
    for m, est in point.items():
        b = boot.get(m)
        out[m] = est if b is None else est.with_inference(b.se, b.ci_low, b.ci_high)
    return out
