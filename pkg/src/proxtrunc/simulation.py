"""Simulation data-generating mechanism, truth, analytic bridge and study runner.

Full-data law (all "max" laws keep their point mass at 0)::

    Z*, U*  ~ max{N(0.6, 0.45^2), 0}
    W1*     = 1.4 + 0.3 Z* - 0.9 U* + N(0, 0.25^2)
    W2*     = 0.6 - 0.2 Z* + 0.5 U* + N(0, 0.25^2)
    T* | Z*, U*   ~ Exp(0.25 + 0.3 Z* + 0.6 U*)
    Q*      = max(tau - E, 0),  E | Z*, U* ~ Exp(0.1 + 0.25 Z* + U*)
    C*      = Q* + D*,  D* ~ Weibull(shape 2, scale 2)

so that ``P(tau - Q* > s | Z*, U*) = exp(-rate s)`` for ``s < tau``, i.e. the
reverse-time hazard of ``Q*`` is ``rate`` on ``(0, tau)``.  A subject is
observed iff ``Q* < T*``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.optimize import brentq
from scipy.stats import norm

from proxtrunc.bootstrap import BootstrapConfig, bootstrap_estimate
from proxtrunc.bridge import BridgePath
from proxtrunc.data import Dataset, EstimandSpec
from proxtrunc.estimators import (
    METHODS,
    TruthOracle,
    canonical_method,
    estimate_many,
)

DEFAULT_TAU_Q = 2.0  # gives ~47% truncation and ~37% observed censoring


@dataclass(frozen=True)
class DgmParams:
    z_mean: float = 0.6
    z_sd: float = 0.45
    u_mean: float = 0.6
    u_sd: float = 0.45
    w1_coef: tuple[float, float, float] = (1.4, 0.3, -0.9)  # intercept, Z, U
    w1_sd: float = 0.25
    w2_coef: tuple[float, float, float] = (0.6, -0.2, 0.5)
    w2_sd: float = 0.25
    t_hazard: tuple[float, float, float] = (0.25, 0.3, 0.6)
    q_rate: tuple[float, float, float] = (0.1, 0.25, 1.0)
    cens_shape: float = 2.0
    cens_scale: float = 2.0
    tau_q_sim: float = DEFAULT_TAU_Q

    def __post_init__(self):
        for name in ("t_hazard", "q_rate"):
            coef = getattr(self, name)
            if coef[0] <= 0 or coef[1] < 0 or coef[2] < 0:
                raise ValueError(f"{name} must have a positive intercept and nonnegative slopes")
        if self.tau_q_sim < 0:
            raise ValueError("tau_q_sim must be nonnegative")

    @classmethod
    def from_mapping(cls, m) -> "DgmParams":
        kw = {}
        for k, v in dict(m).items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        if kw.get("cens_scale") in ("inf", "Inf", "infinity"):
            kw["cens_scale"] = math.inf
        return cls(**kw)


@dataclass(frozen=True)
class FullData:
    z: np.ndarray
    u: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    t: np.ndarray
    q: np.ndarray
    d: np.ndarray


def _max_normal(rng, mean, sd, size):
    return np.maximum(rng.normal(mean, sd, size), 0.0)


def generate_full(m: int, params: DgmParams, rng: np.random.Generator) -> FullData:
    """Draw ``m`` subjects from the full-data (pre-truncation) population."""
    p = params
    z = _max_normal(rng, p.z_mean, p.z_sd, m)
    u = _max_normal(rng, p.u_mean, p.u_sd, m)
    w1 = p.w1_coef[0] + p.w1_coef[1] * z + p.w1_coef[2] * u + rng.normal(0.0, p.w1_sd, m)
    w2 = p.w2_coef[0] + p.w2_coef[1] * z + p.w2_coef[2] * u + rng.normal(0.0, p.w2_sd, m)
    t = rng.exponential(1.0, m) / (p.t_hazard[0] + p.t_hazard[1] * z + p.t_hazard[2] * u)
    e = rng.exponential(1.0, m) / (p.q_rate[0] + p.q_rate[1] * z + p.q_rate[2] * u)
    q = np.maximum(p.tau_q_sim - e, 0.0)
    d = p.cens_scale * rng.weibull(p.cens_shape, m)
    return FullData(z, u, w1, w2, t, q, d)


def generate_observed(n_target: int, params: DgmParams, rng: np.random.Generator) -> Dataset:
    """Draw full-data subjects until ``n_target`` satisfy ``Q* < T*``.

    The returned dataset carries the latent ``U`` (for the benchmark
    estimators) and, in ``notes``, the truncation and censoring fractions.
    """
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    parts = []
    kept = 0
    examined = 0
    while kept < n_target:
        m = max(64, int(1.25 * (n_target - kept) / 0.5))
        fd = generate_full(m, params, rng)
        obs = np.flatnonzero(fd.q < fd.t)
        need = n_target - kept
        if obs.size >= need:
            last = obs[need - 1]
            examined += last + 1
            obs = obs[:need]
        else:
            examined += m
        parts.append((fd, obs))
        kept += obs.size

    def cat(name):
        return np.concatenate([getattr(fd, name)[idx] for fd, idx in parts])

    z, u, w1, w2, t, q, d = (cat(k) for k in ("z", "u", "w1", "w2", "t", "q", "d"))
    c = q + d
    x = np.minimum(t, c)
    delta = (t < c).astype(np.int64)
    ds = Dataset.from_arrays(
        q=q, x=x, delta=delta, w1=w1[:, None], w2=w2[:, None], z=z[:, None], u=u[:, None],
        names={"w1": ["w1"], "w2": ["w2"], "z": ["z"], "u": ["u"]},
    )
    ds.notes["truncation_fraction"] = 1.0 - n_target / examined
    ds.notes["censoring_fraction"] = ds.censoring_fraction
    return ds


def truncation_fraction(params: DgmParams, m: int, rng: np.random.Generator) -> float:
    fd = generate_full(m, params, rng)
    return float(np.mean(fd.q >= fd.t))


def calibrate_tau_q(target: float = 0.47, params: DgmParams = DgmParams(), m: int = 400_000,
                    seed: int = 20240601, bracket=(0.5, 5.0)) -> float:
    """Find the truncation bound giving the target truncation fraction (common random numbers)."""

    def f(tau):
        return truncation_fraction(replace(params, tau_q_sim=tau), m, np.random.default_rng(seed)) - target

    return float(brentq(f, *bracket, xtol=1e-3))


def true_theta(params: DgmParams, n_mc: int, rng: np.random.Generator,
               nu: EstimandSpec = EstimandSpec("SURV_PROB", 1.0)) -> float:
    """Monte Carlo value of ``E nu(T*)`` from a full-data sample."""
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 1e4")
    fd = generate_full(n_mc, params, rng)
    return float(np.mean(nu.nu(fd.t)))


def _mgf_max_normal(s, mean, sd):
    """``E exp(s X)`` for ``X = max{N(mean, sd^2), 0}``."""
    return norm.cdf(-mean / sd) + math.exp(s * mean + 0.5 * s * s * sd * sd) * norm.cdf((mean + s * sd * sd) / sd)


def marginal_survival(t: float, params: DgmParams) -> float:
    """``P(T* > t)`` in closed form (independent Z*, U*)."""
    h0, hz, hu = params.t_hazard
    return math.exp(-h0 * t) * _mgf_max_normal(-hz * t, params.z_mean, params.z_sd) * _mgf_max_normal(
        -hu * t, params.u_mean, params.u_sd
    )


def true_theta_exact(params: DgmParams, nu: EstimandSpec = EstimandSpec("SURV_PROB", 1.0)) -> float:
    if nu.kind == "SURV_PROB":
        return marginal_survival(nu.t0, params)
    val, _ = integrate.quad(marginal_survival, 0.0, nu.t0, args=(params,), epsabs=1e-13, epsrel=1e-12)
    return float(val)


class AnalyticCoefficients:
    """Closed-form bridge coefficients ``(B_0, B_1, B_z)`` for the simulation law.

    With ``W1 = c + g12 Z + g11 U + N(0, s1^2)`` and reverse hazard
    ``a0 + az Z + au U`` the bridge equation holds with, for ``s = tau - t``::

        B_1 = (au / g11) s
        B_z = az s - g12 B_1
        B_0 = a0 s - c B_1 - s1^2 B_1^2 / 2
    """

    def __init__(self, params: DgmParams):
        self.params = params
        self.tau_q = params.tau_q_sim
        self.dim = 3

    def __call__(self, t) -> np.ndarray:
        p = self.params
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.clip(self.tau_q - t, 0.0, None)
        c, g12, g11 = p.w1_coef
        a0, az, au = p.q_rate
        b1 = au / g11 * s
        bz = az * s - g12 * b1
        b0 = a0 * s - c * b1 - 0.5 * p.w1_sd ** 2 * b1 ** 2
        return np.column_stack([b0, b1, bz])


def analytic_bridge(params: DgmParams = DgmParams()) -> BridgePath:
    """Exact bridge path for the simulation law, usable wherever a fitted bridge is."""
    return BridgePath(path=AnalyticCoefficients(params), censor_curve=None, flags=frozenset())


class DgmOracle(TruthOracle):
    """True residual-censoring survival and entry-time CDF given ``(Z, U)``."""

    def __init__(self, params: DgmParams):
        self.params = params

    def censor_survival(self, t):
        p = self.params
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        if math.isinf(p.cens_scale):
            return np.ones_like(t)
        return np.exp(-((t / p.cens_scale) ** p.cens_shape))

    def truncation_cdf(self, t, dataset: Dataset):
        p = self.params
        t = np.asarray(t, dtype=float)
        rate = p.q_rate[0] + p.q_rate[1] * dataset.z[:, 0] + p.q_rate[2] * dataset.u[:, 0]
        return np.where(t >= p.tau_q_sim, 1.0, np.exp(-rate * np.clip(p.tau_q_sim - t, 0.0, None)))


# --------------------------------------------------------------------------- study


@dataclass(frozen=True)
class StudyConfig:
    n: int = 1000
    replications: int = 500
    methods: tuple[str, ...] = METHODS
    bootstrap: int = 200
    seed: int = 2024
    estimand: EstimandSpec = EstimandSpec("SURV_PROB", 1.0)
    params: DgmParams = DgmParams()
    threads: int = 1
    ci_level: float = 0.95
    true_theta: float | None = None

    @classmethod
    def from_mapping(cls, m) -> "StudyConfig":
        m = dict(m)
        study = dict(m.get("study", {}))
        kw = {}
        for key in ("n", "replications", "bootstrap", "seed", "threads"):
            if key in study:
                kw[key] = int(study[key])
        if "ci_level" in study:
            kw["ci_level"] = float(study["ci_level"])
        if "true_theta" in study:
            kw["true_theta"] = float(study["true_theta"])
        if "methods" in study:
            kw["methods"] = tuple(canonical_method(x) for x in study["methods"])
        if "estimand" in m:
            kw["estimand"] = EstimandSpec(m["estimand"]["kind"], float(m["estimand"]["t0"]))
        if "dgm" in m:
            kw["params"] = DgmParams.from_mapping(m["dgm"])
        return cls(**kw)


@dataclass(frozen=True)
class StudyRow:
    method: str
    bias: float
    sd: float
    boot_se: float
    cp: float
    mean_estimate: float
    n_ok: int
    n_failed: int


@dataclass
class StudyReport:
    rows: list[StudyRow]
    n: int
    replications: int
    bootstrap: int
    seed: int
    tau_q_sim: float
    true_theta: float
    estimates: dict = field(default_factory=dict)  # method -> list of per-replication estimates
    boot_ses: dict = field(default_factory=dict)

    def row(self, method: str) -> StudyRow:
        method = canonical_method(method)
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "bias", "sd", "boot_se", "cp", "mean_estimate", "n_ok", "n_failed"])
        for r in self.rows:
            w.writerow([r.method, _fmt(r.bias), _fmt(r.sd), _fmt(r.boot_se), _fmt(r.cp),
                        _fmt(r.mean_estimate), r.n_ok, r.n_failed])
        return buf.getvalue()

    def to_json(self, include_replicates: bool = False) -> str:
        out = {
            "n": self.n,
            "replications": self.replications,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "tau_q_sim": self.tau_q_sim,
            "true_theta": self.true_theta,
            "rows": [asdict(r) for r in self.rows],
        }
        if include_replicates:
            out["estimates"] = self.estimates
            out["boot_se"] = self.boot_ses
        return json.dumps(out, indent=2, sort_keys=True, allow_nan=True)

    def to_table(self) -> str:
        lines = [f"{'Method':<10} {'Bias':>8} {'SD':>7} {'bootSE':>7} {'CP':>6}"]
        for r in self.rows:
            lines.append(f"{r.method:<10} {r.bias:>8.4f} {r.sd:>7.4f} {r.boot_se:>7.4f} {r.cp:>6.3f}")
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


def summarize(method: str, est, se, theta0: float, z: float) -> StudyRow:
    """Bias, SD, mean bootstrap SE and Wald coverage from aligned per-replication arrays."""
    est = np.asarray(est, dtype=float)
    se = np.asarray(se, dtype=float)
    ok = np.isfinite(est)
    n_failed = int(est.size - ok.sum())
    est, se = est[ok], se[ok]
    if est.size == 0:
        return StudyRow(method, math.nan, math.nan, math.nan, math.nan, math.nan, 0, n_failed)
    has_se = np.isfinite(se)
    covered = (est - z * se <= theta0) & (theta0 <= est + z * se)
    return StudyRow(
        method=method,
        bias=float(est.mean() - theta0),
        sd=float(est.std(ddof=1)) if est.size > 1 else 0.0,
        boot_se=float(se[has_se].mean()) if has_se.any() else math.nan,
        cp=float(covered[has_se].mean()) if has_se.any() else math.nan,
        mean_estimate=float(est.mean()),
        n_ok=int(est.size),
        n_failed=n_failed,
    )


def replication_seed(seed: int, stream: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(stream, index))


def _run_replication(args):
    cfg, k = args
    rng = np.random.Generator(np.random.Philox(replication_seed(cfg.seed, 0, k)))
    ds = generate_observed(cfg.n, cfg.params, rng)
    oracle = DgmOracle(cfg.params)
    point = estimate_many(ds, cfg.estimand, cfg.methods, oracle=oracle, on_error=lambda m, e: None)
    out = {}
    boot = {}
    if cfg.bootstrap >= 2:
        bcfg = BootstrapConfig(replications=cfg.bootstrap, seed=cfg.seed, ci_level=cfg.ci_level,
                               stream=(1, k))
        boot = bootstrap_estimate(ds, cfg.estimand, list(point), bcfg, oracle=oracle, raise_on_failure=False)
    for method in cfg.methods:
        if method not in point:
            out[method] = None
            continue
        theta = point[method].theta_hat
        res = boot.get(method)
        se = res.se if res is not None and res.ok else math.nan
        out[method] = (theta, se)
    return out


def run_study(cfg: StudyConfig) -> StudyReport:
    """Monte Carlo study: bias, SD, mean bootstrap SE and Wald coverage per method.

    Replications use seeds derived from ``(seed, index)`` so results do not
    depend on ``threads``.
    """
    methods = tuple(canonical_method(m) for m in cfg.methods)
    cfg = replace(cfg, methods=methods)
    theta0 = cfg.true_theta if cfg.true_theta is not None else true_theta_exact(cfg.params, cfg.estimand)
    jobs = [(cfg, k) for k in range(cfg.replications)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_run_replication, jobs, chunksize=max(1, len(jobs) // (4 * cfg.threads))))
    else:
        results = [_run_replication(j) for j in jobs]

    z = norm.ppf(0.5 + cfg.ci_level / 2)
    rows = []
    estimates, ses = {}, {}
    for m in methods:
        pairs = [r[m] for r in results]
        # per-replication values stay aligned with the replication index; failures are nan
        all_est = np.array([math.nan if p is None else p[0] for p in pairs])
        all_se = np.array([math.nan if p is None else p[1] for p in pairs])
        estimates[m] = [float(v) for v in all_est]
        ses[m] = [float(v) for v in all_se]
        rows.append(summarize(m, all_est, all_se, theta0, z))
    return StudyReport(rows, cfg.n, cfg.replications, cfg.bootstrap, cfg.seed,
                       cfg.params.tau_q_sim, float(theta0), estimates, ses)


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)
