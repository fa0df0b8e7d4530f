"""Point estimators of ``theta = E nu(T*)``.

Weighting estimators share one ratio form,

    theta_hat = sum_i omega_i nu_i / sum_i omega_i,

and differ only in ``omega``: the bridge value (PQB), an inverse fitted
entry-time CDF (IPQW family) or the true CDF (IPQW-o), always divided by the
censoring survival at the residual time.  Time-varying variants use the
adjusted follow-up ``x~ = min(x, t0 v tau_q)``; case-weight variants use the
raw ``(x, delta)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from proxtrunc.bridge import (
    CASE_WEIGHT,
    TIME_VARYING,
    _mode,
    evaluate_bridge,
    evaluate_cdf,
    fit_bridge,
    fit_reverse_cdf,
)
from proxtrunc.data import Dataset, EstimandSpec
from proxtrunc.errors import (
    FLAG_CENSOR_FLOOR,
    FLAG_CURVE_UNDEFINED,
    EstimationError,
    ZeroDenominator,
)
from proxtrunc.linalg import CENSOR_FLOOR, REL_TOL
from proxtrunc.survival import (
    StepFunction,
    km_ignore_truncation,
    km_residual_survival,
    naive_mean,
    product_limit_truncation,
)

PQB = "PQB"
PQB_CW = "PQB-cw"
IPQW = "IPQW"
IPQW_CW = "IPQW-cw"
IPQW_U = "IPQW-U"
IPQW_U_CW = "IPQW-U-cw"
IPQW_O = "IPQW-o"
PL = "PL"
KM = "KM"
NAIVE = "naive"

METHODS = (PQB, IPQW, PQB_CW, IPQW_CW, PL, KM, NAIVE, IPQW_U, IPQW_U_CW, IPQW_O)
SIMULATION_ONLY = (IPQW_U, IPQW_U_CW, IPQW_O)
_BY_KEY = {m.lower(): m for m in METHODS}


def canonical_method(name: str) -> str:
    try:
        return _BY_KEY[name.strip().lower().replace("_", "-")]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass(frozen=True)
class Estimate:
    method: str
    theta_hat: float
    n_used: int
    weight_min: float = math.nan
    weight_max: float = math.nan
    ess: float = math.nan
    flags: tuple[str, ...] = ()
    se: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    t0: float | None = None
    kind: str | None = None

    def with_inference(self, se, ci_low, ci_high) -> "Estimate":
        return replace(self, se=se, ci_low=ci_low, ci_high=ci_high)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "estimand": self.kind,
            "t0": self.t0,
            "theta_hat": self.theta_hat,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_used": self.n_used,
            "weights": {"min": self.weight_min, "max": self.weight_max, "ess": self.ess},
            "flags": list(self.flags),
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class AdjustedRecordView:
    """Follow-up capped at ``t0 v tau_q``; censored records beyond the cap count as events."""

    x_tilde: np.ndarray
    delta_tilde: np.ndarray
    capped: np.ndarray


def adjusted_view(dataset: Dataset, t0: float) -> AdjustedRecordView:
    if not t0 > 0:
        raise ValueError("t0 must be positive")
    cap = max(t0, dataset.tau_q)
    x_tilde = np.minimum(dataset.x, cap)
    capped = dataset.x > cap
    delta_tilde = ((dataset.delta == 1) | capped).astype(np.int64)
    return AdjustedRecordView(x_tilde, delta_tilde, capped)


class TruthOracle:
    """Interface for the true nuisance functions used by IPQW-o (simulation only)."""

    def censor_survival(self, t):  # pragma: no cover - interface
        raise NotImplementedError

    def truncation_cdf(self, t, dataset: Dataset):  # pragma: no cover - interface
        raise NotImplementedError


def _ratio(method, nu_vals, omega, nu: EstimandSpec, flags) -> Estimate:
    denom = float(np.sum(omega))
    if not (denom > 0 and math.isfinite(denom)):
        raise ZeroDenominator(f"{method}: all adjusted event weights are zero")
    # same summation for numerator and denominator, so constant nu gives exactly nu
    theta = float(np.sum(omega * nu_vals) / denom)
    theta = min(max(theta, 0.0), nu.upper)  # guard against rounding outside the range
    pos = omega[omega > 0]
    ess = float(denom ** 2 / np.sum(pos ** 2))
    return Estimate(
        method=method, theta_hat=theta, n_used=int(pos.size),
        weight_min=float(pos.min() / denom), weight_max=float(pos.max() / denom), ess=ess,
        flags=tuple(sorted(flags)), t0=nu.t0, kind=nu.kind,
    )


def _event_terms(dataset, nu, mode, case_weights, s_d, flags):
    """Times at which weights are evaluated, event indicators, nu values and IPCW factors."""
    c = np.ones(dataset.n) if case_weights is None else np.asarray(case_weights, dtype=float)
    if mode == TIME_VARYING:
        view = adjusted_view(dataset, nu.t0)
        times, events = view.x_tilde, view.delta_tilde
    else:
        times, events = dataset.x, dataset.delta
    # nu(x) equals nu(T) for every record with an adjusted event: uncensored,
    # or censored beyond t0 v tau_q >= t0 where nu is constant
    nu_vals = nu.nu(dataset.x)
    s = np.asarray(s_d(times - dataset.q), dtype=float)
    if np.any((s < CENSOR_FLOOR) & (events == 1)):
        flags.add(FLAG_CENSOR_FLOOR)
    ipcw = c * events / np.maximum(s, CENSOR_FLOOR)
    return times, ipcw, nu_vals


def estimate_pqb(dataset: Dataset, nu: EstimandSpec, weight_mode: str = TIME_VARYING,
                 rel_tol: float = REL_TOL, case_weights=None, s_d: StepFunction | None = None,
                 bridge=None) -> Estimate:
    """Proximal bridge-weighted estimator.

    ``bridge`` may be supplied to plug in a known bridge path instead of
    fitting one.
    """
    mode = _mode(weight_mode)
    if s_d is None:
        s_d = km_residual_survival(dataset, case_weights)
    flags: set = set()
    if bridge is None:
        bridge = fit_bridge(dataset, s_d, mode, rel_tol, case_weights)
        flags |= set(bridge.flags)
    times, ipcw, nu_vals = _event_terms(dataset, nu, mode, case_weights, s_d, flags)
    b = evaluate_bridge(bridge, times, dataset.w1, dataset.z)
    method = PQB if mode == TIME_VARYING else PQB_CW
    return _ratio(method, nu_vals, ipcw * b, nu, flags)


def _ipqw_name(roles, mode):
    base = IPQW_U if "U" in roles else IPQW
    return base if mode == TIME_VARYING else f"{base}-cw"


def estimate_ipqw(dataset: Dataset, nu: EstimandSpec, covariate_roles: Sequence[str] = ("W1", "W2", "Z"),
                  weight_mode: str = TIME_VARYING, rel_tol: float = REL_TOL, case_weights=None,
                  s_d: StepFunction | None = None, rp=None) -> Estimate:
    """Inverse probability of truncation weighting with a fitted reverse-time CDF."""
    mode = _mode(weight_mode)
    roles = tuple(r.upper() for r in covariate_roles)
    if s_d is None:
        s_d = km_residual_survival(dataset, case_weights)
    if rp is None:
        rp = fit_reverse_cdf(dataset, roles, s_d, mode, rel_tol, case_weights)
    flags = set(rp.flags)
    times, ipcw, nu_vals = _event_terms(dataset, nu, mode, case_weights, s_d, flags)
    covs = np.hstack([dataset.block(r) for r in roles]) if roles else np.zeros((dataset.n, 0))
    # no upper clamp: the weight is then the exact reciprocal of the fitted
    # model, which keeps IPQW on Z identical to PQB without proxies
    h = evaluate_cdf(rp, times, covs, flags=flags, clamp_upper=False)
    return _ratio(_ipqw_name(roles, mode), nu_vals, ipcw / h, nu, flags)


def estimate_ipqw_oracle(dataset: Dataset, nu: EstimandSpec, oracle: TruthOracle, case_weights=None) -> Estimate:
    """IPQW with the true censoring survival and the true entry-time CDF given ``(Z, U)``."""
    flags: set = set()
    view = adjusted_view(dataset, nu.t0)
    c = np.ones(dataset.n) if case_weights is None else np.asarray(case_weights, dtype=float)
    s = np.asarray(oracle.censor_survival(view.x_tilde - dataset.q), dtype=float)
    g = np.asarray(oracle.truncation_cdf(view.x_tilde, dataset), dtype=float)
    omega = c * view.delta_tilde / (np.maximum(s, CENSOR_FLOOR) * np.maximum(g, CENSOR_FLOOR))
    return _ratio(IPQW_O, nu.nu(dataset.x), omega, nu, flags)


def curve_functional(curve: StepFunction, nu: EstimandSpec) -> float:
    if nu.kind == "SURV_PROB":
        return float(curve(nu.t0))
    return curve.integrate(0.0, nu.t0)


def estimate_classical(dataset: Dataset, nu: EstimandSpec, method: str, case_weights=None) -> Estimate:
    """PL, KM or naive estimate."""
    method = canonical_method(method)
    flags: set = set()
    if method == NAIVE:
        theta = naive_mean(dataset, nu, case_weights)
    elif method in (PL, KM):
        curve = (product_limit_truncation if method == PL else km_ignore_truncation)(dataset, case_weights)
        flags |= set(curve.flags)
        if method == PL and nu.t0 < dataset.q.min():
            flags.add(FLAG_CURVE_UNDEFINED)
        theta = curve_functional(curve, nu)
    else:
        raise ValueError(f"{method} is not a classical estimator")
    n_used = dataset.n if case_weights is None else int(np.count_nonzero(case_weights))
    return Estimate(method=method, theta_hat=float(min(max(theta, 0.0), nu.upper)), n_used=n_used,
                    flags=tuple(sorted(flags)), t0=nu.t0, kind=nu.kind)


def estimate(dataset: Dataset, nu: EstimandSpec, method: str, case_weights=None,
             s_d: StepFunction | None = None, oracle: TruthOracle | None = None,
             rel_tol: float = REL_TOL, _fits: dict | None = None) -> Estimate:
    """Dispatch by method name.

    ``_fits`` is an optional cache of nuisance fits keyed by method, reused
    across estimands (the fits do not depend on ``t0``).
    """
    method = canonical_method(method)
    if method in (PL, KM, NAIVE):
        return estimate_classical(dataset, nu, method, case_weights)
    if method == IPQW_O:
        if oracle is None:
            raise EstimationError("IPQW-o needs the true nuisance functions (simulation only)")
        return estimate_ipqw_oracle(dataset, nu, oracle, case_weights)
    if s_d is None:
        s_d = km_residual_survival(dataset, case_weights)
    mode = CASE_WEIGHT if method.endswith("-cw") else TIME_VARYING
    cache = {} if _fits is None else _fits
    if method in (PQB, PQB_CW):
        if method not in cache:
            cache[method] = fit_bridge(dataset, s_d, mode, rel_tol, case_weights)
        bridge = cache[method]
        est = estimate_pqb(dataset, nu, mode, rel_tol, case_weights, s_d, bridge=bridge)
        return replace(est, flags=tuple(sorted(set(est.flags) | bridge.flags)))
    roles = ("Z", "U") if method.startswith(IPQW_U) else ("W1", "W2", "Z")
    if method not in cache:
        cache[method] = fit_reverse_cdf(dataset, roles, s_d, mode, rel_tol, case_weights)
    return estimate_ipqw(dataset, nu, roles, mode, rel_tol, case_weights, s_d, rp=cache[method])


def estimate_many(dataset: Dataset, nu: EstimandSpec | Sequence[EstimandSpec], methods: Iterable[str],
                  case_weights=None, oracle: TruthOracle | None = None, rel_tol: float = REL_TOL,
                  on_error: Callable[[str, Exception], None] | None = None) -> dict:
    """Run several methods sharing one censoring-survival fit.

    With a sequence of estimands the result is keyed by ``(method, t0)``.
    Failures are reported through ``on_error`` (and omitted) when given,
    otherwise raised.
    """
    specs = [nu] if isinstance(nu, EstimandSpec) else list(nu)
    s_d = km_residual_survival(dataset, case_weights)
    fits: dict = {}
    out: dict = {}
    for method in methods:
        for spec in specs:
            key = method if isinstance(nu, EstimandSpec) else (method, spec.t0)
            try:
                out[key] = estimate(dataset, spec, method, case_weights, s_d, oracle, rel_tol, fits)
            except EstimationError as exc:
                if on_error is None:
                    raise
                on_error(method, exc)
    return out
