"""Truncation-inducing bridge process and reverse-time CDF fits.

The bridge uses the working model ``b(t, w1, z) = exp{(1, w1, z) . B(t)}``
with instruments ``(1, w2, z)``.  The reverse-time CDF model
``H(t | covs) = exp{(1, covs) . alpha(t)}`` is fitted with the same solver,
taking the covariates as both regressors and instruments; the solver returns
``-alpha``, the coefficients of ``1/H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from proxtrunc.data import Dataset
from proxtrunc.errors import FLAG_CDF_ABOVE_ONE, FLAG_CDF_CLAMP, FLAG_CENSOR_FLOOR, DataError, DimensionMismatch
from proxtrunc.linalg import (
    CENSOR_FLOOR,
    ETA_CLAMP,
    REL_TOL,
    CoefficientPath,
    RecursionInput,
    backward_additive_fit,
)
from proxtrunc.survival import StepFunction

TIME_VARYING = "TIME_VARYING"
CASE_WEIGHT = "CASE_WEIGHT"
# matches the linear-predictor clamp so bridge and CDF stay exact reciprocals
CDF_FLOOR = float(np.exp(-ETA_CLAMP))


def _mode(weight_mode: str) -> str:
    mode = weight_mode.upper().replace("-", "_")
    if mode in ("TV", "TIME_VARYING"):
        return TIME_VARYING
    if mode in ("CW", "CASE_WEIGHT"):
        return CASE_WEIGHT
    raise ValueError(f"unknown weight mode {weight_mode!r}")


@dataclass(frozen=True, eq=False)
class BridgePath:
    path: CoefficientPath
    censor_curve: StepFunction
    flags: frozenset = field(default_factory=frozenset)

    @property
    def dim(self) -> int:
        return self.path.dim


@dataclass(frozen=True, eq=False)
class ReverseCdfPath:
    path: CoefficientPath  # holds alpha(t)
    roles: tuple[str, ...]
    flags: frozenset = field(default_factory=frozenset)

    @property
    def dim(self) -> int:
        return self.path.dim


def _recursion_input(dataset, regressors, instruments, s_d, weight_mode, case_weights):
    mode = _mode(weight_mode)
    c = np.ones(dataset.n) if case_weights is None else np.asarray(case_weights, dtype=float)
    flags = set()
    if mode == TIME_VARYING:
        # on the risk set q <= t < x the censoring-survival indicator is 1 and
        # x ^ t = t, so the weight reduces to 1 / S_D(t - q)
        return RecursionInput.with_intercepts(
            dataset.q, dataset.x, regressors, instruments, c, censor_curve=s_d, floor=CENSOR_FLOOR
        ), flags
    s = np.asarray(s_d(dataset.x - dataset.q), dtype=float)
    if np.any((s < CENSOR_FLOOR) & (dataset.delta == 1)):
        flags.add(FLAG_CENSOR_FLOOR)
    w = c * dataset.delta / np.maximum(s, CENSOR_FLOOR)
    return RecursionInput.with_intercepts(dataset.q, dataset.x, regressors, instruments, w), flags


def fit_bridge(dataset: Dataset, s_d: StepFunction, weight_mode: str = TIME_VARYING,
               rel_tol: float = REL_TOL, case_weights=None) -> BridgePath:
    """Fit ``B(t)`` with regressors ``(1, W1, Z)`` and instruments ``(1, W2, Z)``.

    ``TIME_VARYING`` weights subject ``i`` at time ``t`` by ``1/S_D(t - q_i)``;
    ``CASE_WEIGHT`` uses the fixed ``delta_i / S_D(x_i - q_i)``.  Optional
    ``case_weights`` multiply every record (bootstrap multipliers).
    """
    regs = np.hstack([dataset.w1, dataset.z])
    inst = np.hstack([dataset.w2, dataset.z])
    inp, flags = _recursion_input(dataset, regs, inst, s_d, weight_mode, case_weights)
    path = backward_additive_fit(inp, dataset.tau_q, rel_tol)
    return BridgePath(path, s_d, frozenset(flags | path.flags))


def _linear_predictor(path: CoefficientPath, t, covs) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    covs = np.asarray(covs, dtype=float)
    if covs.ndim <= 1:
        covs = covs.reshape(1, -1) if t.size == 1 else covs.reshape(t.size, -1)
    if covs.shape[0] == 1 and t.size > 1:
        covs = np.repeat(covs, t.size, axis=0)
    if covs.shape[1] + 1 != path.dim:
        raise DimensionMismatch(f"expected {path.dim - 1} covariates, got {covs.shape[1]}")
    if covs.shape[0] != t.size:
        raise DimensionMismatch("need one covariate row per time point")
    coef = path(t)
    return coef[:, 0] + np.einsum("ij,ij->i", covs, coef[:, 1:])


def evaluate_bridge(bp: BridgePath, t, w1=(), z=()):
    """``b(t, w1, z)``; exactly 1 for ``t >= tau_q``.

    ``t`` may be a vector, in which case ``w1`` and ``z`` are row-aligned
    ``(len(t), d)`` arrays.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    w1 = np.asarray(w1, dtype=float).reshape(t_arr.size, -1) if np.size(w1) else np.zeros((t_arr.size, 0))
    z = np.asarray(z, dtype=float).reshape(t_arr.size, -1) if np.size(z) else np.zeros((t_arr.size, 0))
    eta = _linear_predictor(bp.path, t_arr, np.hstack([w1, z]))
    out = np.exp(np.clip(eta, -ETA_CLAMP, ETA_CLAMP))
    return float(out[0]) if np.ndim(t) == 0 else out


def fit_reverse_cdf(dataset: Dataset, covariate_roles: Sequence[str], s_d: StepFunction,
                    weight_mode: str = TIME_VARYING, rel_tol: float = REL_TOL,
                    case_weights=None) -> ReverseCdfPath:
    """Reverse-time additive model for the CDF of the entry time given ``covariate_roles``."""
    roles = tuple(r.upper() for r in covariate_roles)
    blocks = [dataset.block(r) for r in roles]
    covs = np.hstack(blocks) if blocks else np.zeros((dataset.n, 0))
    inp, flags = _recursion_input(dataset, covs, covs, s_d, weight_mode, case_weights)
    path = backward_additive_fit(inp, dataset.tau_q, rel_tol)
    alpha = CoefficientPath(path.knots, -path.values, path.tau_q, path.flags)
    return ReverseCdfPath(alpha, roles, frozenset(flags | path.flags))


def evaluate_cdf(rp: ReverseCdfPath, t, covs=(), floor: float = CDF_FLOOR, flags: set | None = None,
                 clamp_upper: bool = True):
    """``H(t | covs)`` clamped to ``(floor, 1]``.

    Raw values above 1 are possible because the additive model does not
    enforce the CDF range; clamping is recorded in ``flags`` if given.  With
    ``clamp_upper=False`` only the floor is applied and values above 1 are
    reported as ``cdf_above_one``.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    covs = np.asarray(covs, dtype=float).reshape(t_arr.size, -1) if np.size(covs) else np.zeros((t_arr.size, 0))
    raw = np.exp(np.clip(_linear_predictor(rp.path, t_arr, covs), -ETA_CLAMP, ETA_CLAMP))
    out = np.clip(raw, floor, 1.0 if clamp_upper else None)
    if flags is not None:
        if np.any(out != raw):
            flags.add(FLAG_CDF_CLAMP)
        if not clamp_upper and np.any(raw > 1.0):
            flags.add(FLAG_CDF_ABOVE_ONE)
    return float(out[0]) if np.ndim(t) == 0 else out


def covariate_matrix(dataset: Dataset, roles: Sequence[str]) -> np.ndarray:
    blocks = [dataset.block(r) for r in roles]
    if not blocks:
        return np.zeros((dataset.n, 0))
    try:
        return np.hstack(blocks)
    except ValueError as exc:  # pragma: no cover - shapes validated by Dataset
        raise DataError(str(exc)) from exc
