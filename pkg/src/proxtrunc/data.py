"""Left-truncated, right-censored datasets: types, CSV ingestion and preprocessing."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from proxtrunc.errors import (
    DataError,
    DegenerateRegressor,
    DimensionMismatch,
    MissingColumn,
    NonNumericCell,
    ViolatesQltX,
)

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

logger = logging.getLogger(__name__)

ROLES = ("Q", "X", "DELTA", "W1", "W2", "Z", "U", "IGNORE")
_MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class ObservedRecord:
    """One observed subject: entry time, follow-up, event flag and covariate blocks."""

    q: float
    x: float
    delta: int
    w1: tuple[float, ...] = ()
    w2: tuple[float, ...] = ()
    z: tuple[float, ...] = ()

    def __post_init__(self):
        if not (math.isfinite(self.q) and math.isfinite(self.x)) or self.q < 0:
            raise DataError(f"times must be finite and nonnegative, got q={self.q}, x={self.x}")
        if not self.q < self.x:
            raise ViolatesQltX(None, self.q, self.x)
        if self.delta not in (0, 1):
            raise DataError(f"delta must be 0 or 1, got {self.delta}")


def _as_block(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, -1) if a.size else np.zeros((n, 0))
    if a.shape[0] != n:
        raise DimensionMismatch(f"{name} has {a.shape[0]} rows, expected {n}")
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented container of observed records.

    Covariate blocks are ``(n, d)`` float arrays; ``u`` carries the latent
    variable and is only populated by the simulator.  Instances are never
    mutated; transforms return new objects.
    """

    q: np.ndarray
    x: np.ndarray
    delta: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    z: np.ndarray
    tau_q: float
    u: np.ndarray | None = None
    names: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.ascontiguousarray(self.q, dtype=float)
        n = q.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one record")
        x = np.ascontiguousarray(self.x, dtype=float)
        delta = np.ascontiguousarray(self.delta, dtype=np.int64)
        if x.shape != (n,) or delta.shape != (n,):
            raise DimensionMismatch("q, x and delta must have equal length")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(x))):
            raise DataError("times must be finite")
        if np.any(q < 0):
            raise DataError("entry times must be nonnegative")
        bad = np.flatnonzero(~(q < x))
        if bad.size:
            i = int(bad[0])
            raise ViolatesQltX(i, q[i], x[i])
        if not np.all((delta == 0) | (delta == 1)):
            raise DataError("delta must be 0/1")
        tau_q = float(self.tau_q) if self.tau_q is not None else float(q.max())
        if tau_q < q.max():
            raise DataError(f"tau_q={tau_q} is below the largest entry time {q.max()}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "w1", _as_block(self.w1, n, "w1"))
        object.__setattr__(self, "w2", _as_block(self.w2, n, "w2"))
        object.__setattr__(self, "z", _as_block(self.z, n, "z"))
        if self.u is not None:
            object.__setattr__(self, "u", _as_block(self.u, n, "u"))
        object.__setattr__(self, "tau_q", tau_q)
        for arr in (self.q, self.x, self.delta, self.w1, self.w2, self.z, self.u):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, q, x, delta, w1=None, w2=None, z=None, tau_q=None, u=None, names=None):
        q = np.asarray(q, dtype=float)
        return cls(q=q, x=x, delta=delta, w1=w1, w2=w2, z=z, tau_q=tau_q, u=u, names=dict(names or {}))

    @classmethod
    def from_records(cls, records: Sequence[ObservedRecord], tau_q: float | None = None) -> "Dataset":
        if not records:
            raise DataError("dataset must contain at least one record")
        dims = {(len(r.w1), len(r.w2), len(r.z)) for r in records}
        if len(dims) != 1:
            raise DimensionMismatch(f"records disagree on proxy dimensions: {sorted(dims)}")
        n = len(records)
        return cls.from_arrays(
            q=[r.q for r in records],
            x=[r.x for r in records],
            delta=[r.delta for r in records],
            w1=np.array([r.w1 for r in records], dtype=float).reshape(n, -1),
            w2=np.array([r.w2 for r in records], dtype=float).reshape(n, -1),
            z=np.array([r.z for r in records], dtype=float).reshape(n, -1),
            tau_q=tau_q,
        )

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d1(self) -> int:
        return self.w1.shape[1]

    @property
    def d2(self) -> int:
        return self.w2.shape[1]

    @property
    def dz(self) -> int:
        return self.z.shape[1]

    @property
    def censoring_fraction(self) -> float:
        return float(np.mean(self.delta == 0))

    @property
    def records(self) -> list[ObservedRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[ObservedRecord]:
        for i in range(self.n):
            yield ObservedRecord(
                float(self.q[i]),
                float(self.x[i]),
                int(self.delta[i]),
                tuple(self.w1[i]),
                tuple(self.w2[i]),
                tuple(self.z[i]),
            )

    def block(self, role: str) -> np.ndarray:
        role = role.upper()
        if role == "U":
            if self.u is None:
                raise DataError("latent U is only available on simulated data")
            return self.u
        try:
            return {"W1": self.w1, "W2": self.w2, "Z": self.z}[role]
        except KeyError:
            raise DataError(f"unknown covariate role {role!r}") from None

    def replace(self, **changes) -> "Dataset":
        fields_ = dict(
            q=self.q, x=self.x, delta=self.delta, w1=self.w1, w2=self.w2, z=self.z,
            tau_q=self.tau_q, u=self.u, names=dict(self.names), notes=dict(self.notes),
        )
        fields_.update(changes)
        return Dataset(**fields_)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return self.replace(
            q=self.q[idx], x=self.x[idx], delta=self.delta[idx], w1=self.w1[idx],
            w2=self.w2[idx], z=self.z[idx], u=None if self.u is None else self.u[idx],
        )

    def equals(self, other: "Dataset") -> bool:
        """Exact equality of all data arrays and tau_q (ignores notes)."""
        if not isinstance(other, Dataset):
            return False
        pairs = [(self.q, other.q), (self.x, other.x), (self.delta, other.delta),
                 (self.w1, other.w1), (self.w2, other.w2), (self.z, other.z)]
        return self.tau_q == other.tau_q and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in pairs
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Assignment of CSV columns to roles.

    ``roles`` maps column name to one of ``Q, X, DELTA, W1, W2, Z, U, IGNORE``.
    Column order within a covariate block follows insertion order.
    """

    roles: Mapping[str, str]
    tau_q: float | None = None

    def __post_init__(self):
        roles = {str(k): str(v).upper() for k, v in dict(self.roles).items()}
        for col, role in roles.items():
            if role not in ROLES:
                raise DataError(f"column {col!r}: unknown role {role!r}")
        for role in ("Q", "X", "DELTA"):
            count = sum(r == role for r in roles.values())
            if count != 1:
                raise DataError(f"schema needs exactly one {role} column, found {count}")
        object.__setattr__(self, "roles", roles)

    def columns(self, role: str) -> list[str]:
        return [c for c, r in self.roles.items() if r == role]

    def single(self, role: str) -> str:
        return self.columns(role)[0]

    @classmethod
    def from_mapping(cls, columns: Mapping, tau_q=None) -> "ColumnSchema":
        """Build from the config layout ``{q, x, delta, w1[], w2[], z[], u[]}``."""
        roles = {}
        for key in ("q", "x", "delta"):
            if key not in columns:
                raise DataError(f"config 'columns' is missing key {key!r}")
            roles[columns[key]] = key.upper()
        for key in ("w1", "w2", "z", "u"):
            names = columns.get(key, [])
            if isinstance(names, str):
                names = [names]
            for name in names:
                if name in roles:
                    raise DataError(f"column {name!r} assigned to more than one role")
                roles[name] = key.upper()
        return cls(roles, tau_q=tau_q)


@dataclass(frozen=True)
class EstimandSpec:
    """Target functional: survival probability ``P(T* > t0)`` or RMST ``E min(T*, t0)``."""

    kind: str
    t0: float

    def __post_init__(self):
        kind = self.kind.upper().replace("-", "_")
        aliases = {"SURVPROB": "SURV_PROB", "SURV": "SURV_PROB", "RMST": "RMST", "SURV_PROB": "SURV_PROB"}
        if kind not in aliases:
            raise DataError(f"unknown estimand kind {self.kind!r}")
        if not (self.t0 > 0 and math.isfinite(self.t0)):
            raise DataError(f"t0 must be positive and finite, got {self.t0}")
        object.__setattr__(self, "kind", aliases[kind])
        object.__setattr__(self, "t0", float(self.t0))

    def nu(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "SURV_PROB":
            return (t > self.t0).astype(float)
        return np.minimum(t, self.t0)

    @property
    def upper(self) -> float:
        return 1.0 if self.kind == "SURV_PROB" else self.t0

    def check_followup(self, dataset: Dataset) -> None:
        if self.t0 > dataset.x.max():
            raise DataError(
                f"t0={self.t0} exceeds the maximum follow-up time {dataset.x.max()}; "
                "the estimand is not identified"
            )


def _parse_float(raw: str, row: int, col: str) -> float | None:
    s = raw.strip()
    if s.lower() in _MISSING:
        return None
    try:
        return float(s)
    except ValueError:
        raise NonNumericCell(row, col, raw) from None


def load_dataset(csv_path, schema: ColumnSchema, strict: bool = False) -> Dataset:
    """Read a comma-separated file into a :class:`Dataset`.

    Rows with a missing value in any role column are dropped (listwise
    deletion).  Non-numeric cells and rows with ``q >= x`` abort the load when
    ``strict`` is set and are otherwise dropped.  Drop counts are stored in
    ``dataset.notes`` and logged.
    """
    path = Path(csv_path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        index = {name: j for j, name in enumerate(header)}
        used = [c for c, r in schema.roles.items() if r != "IGNORE"]
        for col in used:
            if col not in index:
                raise MissingColumn(col)

        blocks = {role: schema.columns(role) for role in ("W1", "W2", "Z", "U")}
        cq, cx, cd = schema.single("Q"), schema.single("X"), schema.single("DELTA")
        rows = []
        dropped = {"missing": 0, "non_numeric": 0, "q_not_below_x": 0, "bad_delta": 0}
        for rownum, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            values = {}
            try:
                for col in used:
                    j = index[col]
                    values[col] = _parse_float(cells[j] if j < len(cells) else "", rownum, col)
            except NonNumericCell:
                if strict:
                    raise
                dropped["non_numeric"] += 1
                continue
            if any(v is None for v in values.values()):
                dropped["missing"] += 1
                continue
            q, x, d = values[cq], values[cx], values[cd]
            if d not in (0.0, 1.0):
                if strict:
                    raise DataError(f"row {rownum}: event indicator must be 0 or 1, got {d}")
                dropped["bad_delta"] += 1
                continue
            if not q < x or q < 0:
                if strict:
                    raise ViolatesQltX(rownum, q, x)
                dropped["q_not_below_x"] += 1
                continue
            rows.append(values)

    if not rows:
        raise DataError(f"{path}: no valid rows")
    n = len(rows)

    def block(role):
        cols = blocks[role]
        return np.array([[r[c] for c in cols] for r in rows], dtype=float).reshape(n, len(cols))

    u = block("U") if blocks["U"] else None
    ds = Dataset.from_arrays(
        q=[r[cq] for r in rows],
        x=[r[cx] for r in rows],
        delta=[int(r[cd]) for r in rows],
        w1=block("W1"),
        w2=block("W2"),
        z=block("Z"),
        u=u,
        tau_q=schema.tau_q,
        names={"q": cq, "x": cx, "delta": cd, **{k.lower(): v for k, v in blocks.items()}},
    )
    ds.notes["dropped"] = dropped
    if any(dropped.values()):
        logger.info("%s: kept %d rows, dropped %s", path, n, dropped)
    return ds


def write_dataset(dataset: Dataset, csv_path) -> ColumnSchema:
    """Write a dataset as CSV and return the schema that reloads it."""
    names = dataset.names
    cq, cx, cd = names.get("q", "q"), names.get("x", "x"), names.get("delta", "delta")
    cols: list[tuple[str, str, np.ndarray]] = [
        (cq, "Q", dataset.q), (cx, "X", dataset.x), (cd, "DELTA", dataset.delta),
    ]
    for role in ("w1", "w2", "z", "u"):
        arr = dataset.u if role == "u" else getattr(dataset, role)
        if arr is None:
            continue
        labels = names.get(role) or [f"{role}_{j + 1}" for j in range(arr.shape[1])]
        cols += [(labels[j], role.upper(), arr[:, j]) for j in range(arr.shape[1])]
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([c[0] for c in cols])
        for i in range(dataset.n):
            w.writerow([int(c[2][i]) if c[1] == "DELTA" else repr(float(c[2][i])) for c in cols])
    return ColumnSchema({c[0]: c[1] for c in cols}, tau_q=dataset.tau_q)


def load_config(path) -> dict:
    """Read a TOML or JSON config; returns the raw mapping."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    return _toml.loads(text.decode())


def schema_from_config(cfg: Mapping) -> ColumnSchema:
    if "columns" not in cfg:
        raise DataError("config has no [columns] table")
    return ColumnSchema.from_mapping(cfg["columns"], tau_q=cfg.get("tau_q"))


def estimand_from_config(cfg: Mapping) -> EstimandSpec | None:
    est = cfg.get("estimand")
    if est is None:
        return None
    return EstimandSpec(est["kind"], float(est["t0"]))


def _column(dataset: Dataset, ref) -> tuple[np.ndarray, tuple | None]:
    """Resolve a column name to (values, (block, j)) or accept raw values."""
    if isinstance(ref, str):
        if ref in ("q", "x") or ref == dataset.names.get("q") or ref == dataset.names.get("x"):
            key = "q" if ref in ("q", dataset.names.get("q")) else "x"
            return getattr(dataset, key), None
        for role in ("w1", "w2", "z"):
            labels = dataset.names.get(role) or [f"{role}_{j + 1}" for j in range(getattr(dataset, role).shape[1])]
            if ref in labels:
                j = labels.index(ref)
                return getattr(dataset, role)[:, j], (role, j)
        raise MissingColumn(ref)
    vals = np.asarray(ref, dtype=float)
    if vals.shape != (dataset.n,):
        raise DimensionMismatch(f"regressor has shape {vals.shape}, expected ({dataset.n},)")
    return vals, None


def ols_residuals(y, x) -> tuple[np.ndarray, float, float]:
    """Residuals, intercept and slope of the simple regression of ``y`` on ``x``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.size < 3:
        raise DataError("need at least 3 observations to residualize")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-12 * max(1.0, float(x @ x)):
        raise DegenerateRegressor("regressor has zero variance")
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    return y - intercept - slope * x, intercept, slope


def residualize_on(dataset: Dataset, covariate: str, regressor) -> Dataset:
    """Replace a covariate column by its OLS residuals on ``regressor``.

    ``regressor`` is a column name in the dataset or an array of length n
    (e.g. an age column that is not itself part of the model).
    """
    y, loc = _column(dataset, covariate)
    if loc is None:
        raise DataError(f"{covariate!r} is not a covariate column")
    x, _ = _column(dataset, regressor)
    resid, _, _ = ols_residuals(y, x)
    role, j = loc
    block = np.array(getattr(dataset, role))
    block[:, j] = resid
    return dataset.replace(**{role: block})
