import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_dataset
from proxtrunc.errors import FLAG_EMPTY_RISK_SET, FLAG_EXP_CLAMP, NonFiniteInput
from proxtrunc.linalg import (
    CoefficientPath,
    RecursionInput,
    backward_additive_fit,
    pseudo_inverse,
)
from proxtrunc.simulation import DgmParams, generate_observed
from proxtrunc.survival import km_residual_survival


def penrose_errors(a, g):
    return (
        np.linalg.norm(a @ g @ a - a),
        np.linalg.norm(g @ a @ g - g),
        np.linalg.norm((a @ g).T - a @ g),
        np.linalg.norm((g @ a).T - g @ a),
    )


def test_pinv_simple_cases():
    np.testing.assert_array_equal(pseudo_inverse(np.eye(3)), np.eye(3))
    np.testing.assert_array_equal(pseudo_inverse(np.zeros((2, 3))), np.zeros((3, 2)))
    np.testing.assert_allclose(pseudo_inverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    with pytest.raises(NonFiniteInput):
        pseudo_inverse(np.array([[1.0, np.nan]]))


def test_pinv_penrose_conditions_random():
    rng = np.random.default_rng(0)
    for k in range(100):
        a = rng.normal(size=(4, 4))
        if k % 3 == 0:  # rank deficient
            a[:, 3] = a[:, 0] - 2 * a[:, 1]
        if k % 5 == 0:
            a = a @ np.diag([1.0, 1.0, 0.0, 1.0])
        g = pseudo_inverse(a)
        tol = 1e-8 * np.linalg.norm(a) * max(1.0, np.linalg.norm(g)) ** 2
        assert max(penrose_errors(a, g)) < tol


def test_pinv_truncation():
    a = np.diag([1.0, 1e-12])
    np.testing.assert_allclose(pseudo_inverse(a, 1e-8), np.diag([1.0, 0.0]))


def reference_fit(inp: RecursionInput, tau_q):
    """Literal backward recursion with the textbook weight definition."""
    times = np.unique(inp.q)
    b = np.zeros(inp.regressors.shape[1])
    out = {}
    for t in times[::-1]:
        w = inp.weights_at(t)
        e = w * np.exp(inp.regressors @ b)
        m = (inp.instruments * e[:, None]).T @ inp.regressors
        jump = inp.q == t
        j = (inp.instruments[jump] * e[jump, None]).sum(axis=0)
        if e.sum() > 0:
            b = b + np.linalg.pinv(m, rcond=1e-8) @ j
        out[t] = b.copy()
    return times, np.array([out[t] for t in times])


def test_hand_two_record_recursion():
    inp = RecursionInput.with_intercepts([1.0, 2.0], [3.0, 4.0], np.zeros((2, 0)), np.zeros((2, 0)), [1.0, 1.0])
    path = backward_additive_fit(inp, tau_q=2.5)
    vals = path(np.array([0.5, 1.0, 1.5, 2.0, 2.2, 2.5, 3.0]))[:, 0]
    assert list(vals) == [1.5, 1.5, 0.5, 0.5, 0.0, 0.0, 0.0]


def test_no_interior_jumps_gives_zero_path():
    inp = RecursionInput.with_intercepts([0.0, 0.0], [1.0, 2.0], np.zeros((2, 0)), np.zeros((2, 0)), [1.0, 1.0])
    path = backward_additive_fit(inp, tau_q=3.0)
    # the only entry time is 0; the path above 0 is zero
    np.testing.assert_array_equal(path(np.array([0.5, 2.0, 3.0]))[:, 0], [0.0, 0.0, 0.0])


def test_zero_beyond_tau_q():
    ds = random_dataset(np.random.default_rng(1), n=80)
    inp = RecursionInput.with_intercepts(ds.q, ds.x, np.hstack([ds.w1, ds.z]), np.hstack([ds.w2, ds.z]), np.ones(ds.n))
    path = backward_additive_fit(inp, ds.tau_q)
    np.testing.assert_array_equal(path(np.array([ds.tau_q, ds.tau_q + 1.0])), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000), st.booleans(), st.booleans())
def test_kernel_matches_reference(seed, ties, curve):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=int(rng.integers(5, 60)), ties=ties)
    s_d = km_residual_survival(ds) if curve else None
    base = rng.uniform(0.5, 2.0, ds.n)
    inp = RecursionInput.with_intercepts(ds.q, ds.x, np.hstack([ds.w1, ds.z]), np.hstack([ds.w2, ds.z]),
                                         base, censor_curve=s_d)
    path = backward_additive_fit(inp, ds.tau_q)
    times, ref = reference_fit(inp, ds.tau_q)
    np.testing.assert_array_equal(path.knots, times)
    if FLAG_EXP_CLAMP not in path.flags:
        np.testing.assert_allclose(path.values, ref, rtol=1e-7, atol=1e-7)


def test_intercept_only_is_reverse_nelson_aalen():
    rng = np.random.default_rng(4)
    ds = random_dataset(rng, n=50, censor=False, ties=True)
    inp = RecursionInput.with_intercepts(ds.q, ds.x, np.zeros((ds.n, 0)), np.zeros((ds.n, 0)), np.ones(ds.n))
    path = backward_additive_fit(inp, ds.tau_q)
    # reverse-time Nelson-Aalen: sum over entry times s >= t of dN(s) / #{q <= s < x}
    for t in path.knots[path.knots < ds.tau_q]:
        na = sum(np.sum(ds.q == s) / np.sum((ds.q <= s) & (s < ds.x)) for s in np.unique(ds.q) if s >= t)
        assert path(np.array([t]))[0, 0] == pytest.approx(na, rel=1e-12)


def test_weight_scaling_invariance():
    ds = random_dataset(np.random.default_rng(7), n=60)
    regs, inst = np.hstack([ds.w1, ds.z]), np.hstack([ds.w2, ds.z])
    a = backward_additive_fit(RecursionInput.with_intercepts(ds.q, ds.x, regs, inst, np.ones(ds.n)), ds.tau_q)
    b = backward_additive_fit(RecursionInput.with_intercepts(ds.q, ds.x, regs, inst, np.full(ds.n, 7.5)), ds.tau_q)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-10, atol=1e-12)


def test_estimating_equation_residual_vanishes():
    ds = generate_observed(300, DgmParams(), np.random.default_rng(8))
    s_d = km_residual_survival(ds)
    inp = RecursionInput.with_intercepts(ds.q, ds.x, np.hstack([ds.w1, ds.z]), np.hstack([ds.w2, ds.z]),
                                         np.ones(ds.n), censor_curve=s_d)
    path = backward_additive_fit(inp, ds.tau_q)
    knots = path.knots
    for k, t in enumerate(knots):
        after = path.values[k + 1] if k + 1 < knots.size else np.zeros(path.dim)
        d_b = path.values[k] - after
        e = inp.weights_at(t) * np.exp(inp.regressors @ after)
        m = (inp.instruments * e[:, None]).T @ inp.regressors
        j = (inp.instruments[ds.q == t] * e[ds.q == t, None]).sum(axis=0)
        if np.linalg.matrix_rank(m) == m.shape[1]:
            assert np.abs(m @ d_b - j).max() / ds.n < 1e-8


def test_tied_entries_aggregated_and_order_invariant():
    rng = np.random.default_rng(9)
    ds = random_dataset(rng, n=70, ties=True)
    regs, inst = np.hstack([ds.w1, ds.z]), np.hstack([ds.w2, ds.z])
    a = backward_additive_fit(RecursionInput.with_intercepts(ds.q, ds.x, regs, inst, np.ones(ds.n)), ds.tau_q)
    perm = rng.permutation(ds.n)
    b = backward_additive_fit(
        RecursionInput.with_intercepts(ds.q[perm], ds.x[perm], regs[perm], inst[perm], np.ones(ds.n)), ds.tau_q
    )
    assert a.knots.size == np.unique(ds.q).size
    np.testing.assert_allclose(a.values, b.values, rtol=1e-9, atol=1e-12)


def test_empty_risk_set_flag():
    inp = RecursionInput.with_intercepts([0.0, 1.0], [0.5, 2.0], np.zeros((2, 0)), np.zeros((2, 0)), [0.0, 1.0])
    path = backward_additive_fit(inp, 1.0)
    assert FLAG_EMPTY_RISK_SET in path.flags


def test_path_csv(tmp_path):
    p = CoefficientPath([1.0, 2.0], [[0.1, 0.2], [0.3, 0.4]], 3.0)
    p.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,coeff_1,coeff_2" and lines[1] == "1.0,0.1,0.2"
