import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import random_dataset
from proxtrunc.data import (
    ColumnSchema,
    Dataset,
    EstimandSpec,
    ObservedRecord,
    load_config,
    load_dataset,
    ols_residuals,
    residualize_on,
    schema_from_config,
    write_dataset,
)
from proxtrunc.errors import (
    DataError,
    DegenerateRegressor,
    MissingColumn,
    NonNumericCell,
    ViolatesQltX,
)

BASIC = ColumnSchema({"q": "Q", "x": "X", "d": "DELTA"})


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_rows_no_covariates(tmp_path):
    p = write(tmp_path, "q,x,d\n0,1,1\n0.5,2,0\n1,3,1\n")
    ds = load_dataset(p, BASIC)
    assert ds.n == 3 and (ds.d1, ds.d2, ds.dz) == (0, 0, 0)
    assert ds.tau_q == 1.0
    np.testing.assert_array_equal(ds.delta, [1, 0, 1])


def test_q_equal_x_rejected_in_strict_mode(tmp_path):
    p = write(tmp_path, "q,x,d\n0,1,1\n2.0,2.0,1\n")
    with pytest.raises(ViolatesQltX):
        load_dataset(p, BASIC, strict=True)
    ds = load_dataset(p, BASIC)
    assert ds.n == 1 and ds.notes["dropped"]["q_not_below_x"] == 1


def test_missing_column_named(tmp_path):
    p = write(tmp_path, "q,x\n0,1\n")
    with pytest.raises(MissingColumn) as exc:
        load_dataset(p, BASIC)
    assert exc.value.column == "d"


def test_non_numeric_and_missing_rows(tmp_path):
    p = write(tmp_path, "q,x,d,age\n0,1,1,3\n0,abc,1,3\n0,2,,4\n0.1,2,0,NA\n")
    schema = ColumnSchema({"q": "Q", "x": "X", "d": "DELTA", "age": "Z"})
    ds = load_dataset(p, schema)
    assert ds.n == 1
    assert ds.notes["dropped"]["non_numeric"] == 1
    assert ds.notes["dropped"]["missing"] == 2
    with pytest.raises(NonNumericCell):
        load_dataset(p, schema, strict=True)


def test_haas_shaped_censoring_fraction(tmp_path):
    rng = np.random.default_rng(3)
    n, n_cens = 1930, 351
    q = rng.uniform(71, 90, n)
    x = q + rng.uniform(0.1, 20, n)
    d = np.ones(n, dtype=int)
    d[rng.choice(n, n_cens, replace=False)] = 0
    ds = Dataset.from_arrays(q=q, x=x, delta=d, w1=rng.normal(size=n), w2=rng.normal(size=n))
    schema = write_dataset(ds, tmp_path / "haas.csv")
    back = load_dataset(tmp_path / "haas.csv", schema)
    assert round(back.censoring_fraction, 3) == 0.182


def test_roundtrip_is_identical(tmp_path):
    ds = random_dataset(np.random.default_rng(0), n=50, d1=2, d2=1, dz=2)
    schema = write_dataset(ds, tmp_path / "a.csv")
    back = load_dataset(tmp_path / "a.csv", schema)
    assert back.equals(ds)
    schema2 = write_dataset(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert schema2.roles == schema.roles


def test_config_toml_and_json(tmp_path):
    toml = write(tmp_path, 'tau_q = 5.0\n[columns]\nq = "q"\nx = "x"\ndelta = "d"\nw1 = ["a"]\n'
                           '[estimand]\nkind = "RMST"\nt0 = 2.0\n', "s.toml")
    cfg = load_config(toml)
    schema = schema_from_config(cfg)
    assert schema.roles == {"q": "Q", "x": "X", "d": "DELTA", "a": "W1"}
    assert schema.tau_q == 5.0
    js = tmp_path / "s.json"
    js.write_text(json.dumps({"columns": {"q": "q", "x": "x", "delta": "d"}}))
    assert schema_from_config(load_config(js)).roles == {"q": "Q", "x": "X", "d": "DELTA"}


def test_schema_validation():
    with pytest.raises(DataError):
        ColumnSchema({"q": "Q", "x": "X"})
    with pytest.raises(DataError):
        ColumnSchema({"q": "Q", "x": "X", "d": "DELTA", "e": "DELTA"})
    with pytest.raises(DataError):
        ColumnSchema({"q": "Q", "x": "X", "d": "DELTA", "e": "BOGUS"})


def test_record_invariants():
    with pytest.raises(DataError):
        ObservedRecord(1.0, 1.0, 1)
    with pytest.raises(DataError):
        ObservedRecord(0.0, 1.0, 2)
    ds = Dataset.from_records([ObservedRecord(0.0, 1.0, 1, (1.0,), (), (2.0,)),
                               ObservedRecord(0.5, 2.0, 0, (3.0,), (), (4.0,))])
    assert (ds.d1, ds.d2, ds.dz) == (1, 0, 1)
    assert ds.records[1] == ObservedRecord(0.5, 2.0, 0, (3.0,), (), (4.0,))


def test_tau_q_default_and_override():
    ds = Dataset.from_arrays(q=[0, 1.5], x=[1, 2], delta=[1, 1])
    assert ds.tau_q == 1.5
    assert Dataset.from_arrays(q=[0, 1.5], x=[1, 2], delta=[1, 1], tau_q=3).tau_q == 3
    with pytest.raises(DataError):
        Dataset.from_arrays(q=[0, 1.5], x=[1, 2], delta=[1, 1], tau_q=1)


def test_dataset_is_immutable():
    ds = Dataset.from_arrays(q=[0, 1], x=[1, 2], delta=[1, 0])
    with pytest.raises(ValueError):
        ds.q[0] = 0.5


def test_estimand_spec():
    assert EstimandSpec("survprob", 1).kind == "SURV_PROB"
    spec = EstimandSpec("RMST", 2.0)
    np.testing.assert_allclose(spec.nu([1.0, 3.0]), [1.0, 2.0])
    np.testing.assert_allclose(EstimandSpec("SURV_PROB", 1).nu([0.5, 1.0, 1.5]), [0, 0, 1])
    with pytest.raises(DataError):
        EstimandSpec("SURV_PROB", 0.0)
    ds = Dataset.from_arrays(q=[0, 1], x=[1, 2], delta=[1, 0])
    with pytest.raises(DataError):
        EstimandSpec("SURV_PROB", 3.0).check_followup(ds)


def test_residualize_hand_example():
    resid, a, b = ols_residuals([1, 2, 4], [0, 1, 2])
    assert b == pytest.approx(1.5)
    assert a == pytest.approx(5 / 6)
    np.testing.assert_allclose(resid, [1 / 6, -1 / 3, 1 / 6], atol=1e-12)


def test_residualize_perfect_fit_and_degenerate():
    resid, _, _ = ols_residuals([3, 5, 7, 9], [1, 2, 3, 4])
    np.testing.assert_allclose(resid, 0, atol=1e-12)
    with pytest.raises(DegenerateRegressor):
        ols_residuals([1, 2, 3], [1, 1, 1])


def test_residualize_on_dataset():
    rng = np.random.default_rng(1)
    ds = random_dataset(rng, n=30, dz=2)
    age = rng.normal(80, 5, ds.n)
    out = residualize_on(ds, "z_2", age)
    np.testing.assert_array_equal(out.z[:, 0], ds.z[:, 0])
    assert abs(out.z[:, 1].mean()) < 1e-10
    out2 = residualize_on(ds, "w1_1", "z_1")
    assert abs(out2.w1[:, 0] @ (ds.z[:, 0] - ds.z[:, 0].mean())) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=40))
def test_residuals_orthogonal(pairs):
    y = np.array([p[0] for p in pairs])
    x = np.array([p[1] for p in pairs])
    assume(np.ptp(x) > 1e-3)
    resid, _, _ = ols_residuals(y, x)
    scale = max(1.0, np.abs(y).max()) * max(1.0, np.abs(x).max()) * len(x)
    assert abs(resid.sum()) < 1e-10 * scale
    assert abs(resid @ x) < 1e-10 * scale * max(1.0, np.abs(x).max())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_generated_records_satisfy_q_below_x(seed, n):
    ds = random_dataset(np.random.default_rng(seed), n=n)
    assert np.all(ds.q < ds.x)
    assert ds.tau_q == ds.q.max()
    assert math.isclose(ds.censoring_fraction, np.mean(ds.delta == 0))
