import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_dataset
from proxtrunc.bridge import BridgePath
from proxtrunc.data import Dataset, EstimandSpec
from proxtrunc.discrete import DiscreteModel, discrete_oracle
from proxtrunc.errors import FLAG_CURVE_UNDEFINED, DataError, EstimationError, ZeroDenominator
from proxtrunc.estimators import (
    IPQW,
    IPQW_O,
    IPQW_U,
    KM,
    METHODS,
    NAIVE,
    PL,
    PQB,
    PQB_CW,
    adjusted_view,
    canonical_method,
    estimate,
    estimate_classical,
    estimate_ipqw,
    estimate_many,
    estimate_pqb,
)
from proxtrunc.linalg import CoefficientPath
from proxtrunc.simulation import DgmOracle, DgmParams, generate_observed

REAL_METHODS = [m for m in METHODS if m not in ("IPQW-U", "IPQW-U-cw", IPQW_O)]


def test_adjusted_view_examples():
    ds = Dataset.from_arrays(q=[0, 0, 0], x=[2, 7, 3], delta=[1, 0, 0], tau_q=4.0)
    v = adjusted_view(ds, 5.0)
    np.testing.assert_array_equal(v.x_tilde, [2, 5, 3])
    np.testing.assert_array_equal(v.delta_tilde, [1, 1, 0])
    assert np.all(v.x_tilde <= ds.x) and np.all(v.delta_tilde >= ds.delta)
    # cap is tau_q when it exceeds t0
    v = adjusted_view(ds, 1.0)
    np.testing.assert_array_equal(v.x_tilde, [2, 4, 3])
    with pytest.raises(ValueError):
        adjusted_view(ds, 0.0)


def test_method_names():
    assert canonical_method("pqb_cw") == PQB_CW
    assert canonical_method("ipqw-u") == IPQW_U
    assert canonical_method("NAIVE") == NAIVE
    with pytest.raises(ValueError):
        canonical_method("foo")


@pytest.mark.parametrize("method", REAL_METHODS)
def test_constant_nu_gives_one(method):
    ds = random_dataset(np.random.default_rng(0), n=80)
    spec = EstimandSpec("SURV_PROB", 0.5 * ds.x.min())
    assert estimate(ds, spec, method).theta_hat == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from(["SURV_PROB", "RMST"]))
def test_range_and_order_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=int(rng.integers(20, 80)))
    spec = EstimandSpec(kind, float(np.quantile(ds.x, 0.4)))
    perm = rng.permutation(ds.n)
    shuffled = ds.subset(perm)
    a = estimate_many(ds, spec, REAL_METHODS, on_error=lambda m, e: None)
    b = estimate_many(shuffled, spec, REAL_METHODS, on_error=lambda m, e: None)
    assert a.keys() == b.keys()
    for m, est in a.items():
        assert 0.0 <= est.theta_hat <= spec.upper
        assert est.theta_hat == pytest.approx(b[m].theta_hat, rel=1e-9, abs=1e-12)
        if np.isfinite(est.weight_min):
            assert est.weight_min >= 0


def test_modes_agree_without_censoring():
    ds = random_dataset(np.random.default_rng(1), n=100, censor=False)
    spec = EstimandSpec("SURV_PROB", float(np.median(ds.x)))
    assert estimate(ds, spec, PQB).theta_hat == estimate(ds, spec, PQB_CW).theta_hat
    assert estimate(ds, spec, IPQW).theta_hat == estimate(ds, spec, "IPQW-cw").theta_hat


@pytest.mark.parametrize("seed", range(5))
def test_remark_one_pqb_equals_ipqw_on_z(seed):
    ds = random_dataset(np.random.default_rng(seed), n=200, d1=0, d2=0, dz=1)
    spec = EstimandSpec("SURV_PROB", float(np.median(ds.x)))
    a = estimate_pqb(ds, spec)
    b = estimate_ipqw(ds, spec, ("Z",))
    assert a.theta_hat == pytest.approx(b.theta_hat, abs=1e-10)


def test_classical_examples():
    x = np.array([0.5, 1.5, 2.5, 3.5])
    ds = Dataset.from_arrays(q=np.zeros(4), x=x, delta=np.ones(4))
    assert estimate_classical(ds, EstimandSpec("SURV_PROB", 2.0), PL).theta_hat == 0.5
    assert estimate_classical(ds, EstimandSpec("SURV_PROB", 2.0), KM).theta_hat == 0.5
    assert estimate_classical(ds, EstimandSpec("RMST", 0.4), PL).theta_hat == pytest.approx(0.4)
    assert estimate_classical(ds, EstimandSpec("RMST", 2.0), KM).theta_hat == pytest.approx(
        0.5 + 0.75 + 0.5 * 0.5
    )
    late = Dataset.from_arrays(q=[1.0, 1.2], x=[2.0, 3.0], delta=[1, 1])
    est = estimate_classical(late, EstimandSpec("SURV_PROB", 0.5), PL)
    assert FLAG_CURVE_UNDEFINED in est.flags and est.theta_hat == 1.0


def test_zero_denominator():
    ds = Dataset.from_arrays(q=[0.0, 0.5], x=[1.0, 2.0], delta=[0, 0], w1=[1, 2], w2=[1, 2], tau_q=5.0)
    with pytest.raises(ZeroDenominator):
        estimate_pqb(ds, EstimandSpec("SURV_PROB", 1.0))


def test_simulation_only_methods_need_inputs():
    ds = random_dataset(np.random.default_rng(2), n=30)
    spec = EstimandSpec("SURV_PROB", 1.0)
    with pytest.raises(DataError):
        estimate(ds, spec, IPQW_U)
    with pytest.raises(EstimationError):
        estimate(ds, spec, IPQW_O)


def test_estimate_json():
    ds = random_dataset(np.random.default_rng(3), n=60)
    est = estimate(ds, EstimandSpec("SURV_PROB", 1.0), PQB)
    out = json.loads(est.with_inference(0.1, 0.2, 0.4).to_json())
    assert {"method", "theta_hat", "se", "ci_low", "ci_high", "flags"} <= out.keys()
    assert out["method"] == "PQB" and out["se"] == 0.1
    assert out["weights"]["ess"] > 0


def test_uniform_case_weights_reproduce_point_estimates():
    ds = generate_observed(300, DgmParams(), np.random.default_rng(4))
    spec = EstimandSpec("SURV_PROB", 1.0)
    oracle = DgmOracle(DgmParams())
    a = estimate_many(ds, spec, METHODS, oracle=oracle)
    b = estimate_many(ds, spec, METHODS, case_weights=np.full(ds.n, 1 / ds.n), oracle=oracle)
    for m in METHODS:
        assert a[m].theta_hat == pytest.approx(b[m].theta_hat, rel=1e-9, abs=1e-12)


def test_estimate_many_over_horizons_matches_single_calls():
    ds = generate_observed(300, DgmParams(), np.random.default_rng(5))
    specs = [EstimandSpec("SURV_PROB", t) for t in (0.5, 1.0, 1.5)]
    grid = estimate_many(ds, specs, [PQB, IPQW, PL])
    for spec in specs:
        for m in (PQB, IPQW, PL):
            assert grid[(m, spec.t0)].theta_hat == estimate(ds, spec, m).theta_hat


def table_bridge(bridge, tau):
    """Coefficient path reproducing a bridge table b(t, w1) on integer times, w1 in {0, 1}."""
    k = bridge.shape[0] - 1
    knots = np.arange(1, k + 1, dtype=float)
    b0 = np.log(bridge[1:, 0])
    b1 = np.log(bridge[1:, 1]) - b0
    return BridgePath(CoefficientPath(knots, np.column_stack([b0, b1]), float(tau)), None)


def positive_bridge_models(count, seed=0):
    """Random finite models whose exact bridge is positive, so the exponential form can carry it."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        model = DiscreteModel.random(rng)
        res = discrete_oracle(model)
        if np.all(res.bridge > 0):
            out.append((model, res))
    return out


@pytest.mark.parametrize("model,res", positive_bridge_models(4))
def test_pqb_with_exact_bridge_on_enumerated_population(model, res):
    p = model.joint()
    rows = []
    for (u, w1, w2, q, ti), mass in np.ndenumerate(p):
        t = ti + 1
        if q < t and mass > 0:
            rows.append((q, t, w1, w2, mass))
    rows = np.array(rows, dtype=float)
    # on the integer grid an entry at q only moves the bridge at t <= q, so the
    # bridge reaches 1 at tau rather than at the largest entry time tau - 1
    ds = Dataset.from_arrays(q=rows[:, 0], x=rows[:, 1], delta=np.ones(len(rows)), w1=rows[:, 2],
                             w2=rows[:, 3], tau_q=model.tau)
    est = estimate_pqb(ds, EstimandSpec("SURV_PROB", 1.0), case_weights=rows[:, 4],
                       bridge=table_bridge(res.bridge, model.tau))
    assert est.theta_hat == pytest.approx(res.theta, abs=1e-12)
