"""Finite-state model with an exactly solvable bridge, for identification checks.

Binary latent ``U`` and binary proxies ``W1``, ``W2``; no measured covariates.
Entry time ``Q* in {0, ..., tau-1}`` depends on ``(U, W1)``, event time
``T* in {1, ..., K}`` on ``U``, and ``W2`` on ``U``; all conditionally
independent given ``U`` apart from that.  A subject is observed iff
``Q* < T*``; there is no censoring.

On the integer grid the bridge equation reads, for ``t = tau-1, ..., 1``
and each ``w2``,

    E[1(Q < t) b(t, W1) | Q <= t < T, W2 = w2] = E[b(t+1, W1) | Q <= t < T, W2 = w2]

with ``b(t, w1) = 1`` for ``t >= tau``.  Writing ``b(t, w1) = b(t+1, w1) g(w1)``
gives a 2x2 linear system in ``g`` per time point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from proxtrunc.errors import SingularProxyLaw
from proxtrunc.linalg import pseudo_inverse

RANK_TOL = 1e-10


@dataclass(frozen=True)
class DiscreteModel:
    p_u: np.ndarray  # (2,)
    p_w1_u: np.ndarray  # (u, w1)
    p_w2_u: np.ndarray  # (u, w2)
    p_q_uw1: np.ndarray  # (u, w1, q) over q = 0..tau-1
    p_t_u: np.ndarray  # (u, t) over t = 1..K

    def __post_init__(self):
        for name in ("p_u", "p_w1_u", "p_w2_u", "p_q_uw1", "p_t_u"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if np.any(arr < 0) or not np.allclose(arr.sum(axis=-1), 1.0, atol=1e-12):
                raise ValueError(f"{name} must hold probability vectors along its last axis")
            object.__setattr__(self, name, arr)
        if self.tau >= self.p_t_u.shape[1] + 1:
            raise ValueError("entry-time support must end before the last event time")

    @property
    def tau(self) -> int:
        return self.p_q_uw1.shape[2]

    @property
    def k(self) -> int:
        return self.p_t_u.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, tau: int = 4, k: int = 6, independent_u: bool = False):
        """Random model with full-rank ``W2 | U`` law.

        With ``independent_u`` the latent affects only ``W2``, so entry and
        event times are independent and the proxies carry no confounding.
        """
        def simplex(*shape):
            return rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]) if len(shape) > 1 else rng.dirichlet(np.ones(shape[0]))

        p_u = rng.uniform(0.2, 0.8)
        a, b = rng.uniform(0.1, 0.4), rng.uniform(0.6, 0.9)
        p_w2 = np.array([[1 - a, a], [1 - b, b]])
        if independent_u:
            w1 = simplex(2)
            p_w1 = np.array([w1, w1])
            pq = simplex(2, tau)
            p_q = np.array([pq, pq])
            pt = simplex(k)
            p_t = np.array([pt, pt])
        else:
            p_w1 = simplex(2, 2)
            p_q = simplex(2, 2, tau)
            p_t = simplex(2, k)
        return cls(np.array([1 - p_u, p_u]), p_w1, p_w2, p_q, p_t)

    def joint(self) -> np.ndarray:
        """Full-data probabilities indexed ``[u, w1, w2, q, t-1]``."""
        return np.einsum(
            "u,ua,ub,uaq,ut->uabqt", self.p_u, self.p_w1_u, self.p_w2_u, self.p_q_uw1, self.p_t_u
        )


@dataclass(frozen=True)
class DiscreteOracleResult:
    bridge: np.ndarray  # (K+1, 2): b(t, w1) for t = 0..K (row 0 unused)
    theta: float
    ratio: float
    max_residual: float


def _check_completeness(model: DiscreteModel):
    s = np.linalg.svd(model.p_w2_u, compute_uv=False)
    if s[-1] <= RANK_TOL * s[0]:
        raise SingularProxyLaw("the W2 | U law is rank deficient")


def discrete_oracle(model: DiscreteModel, nu=None) -> DiscreteOracleResult:
    """Exact bridge table, enumerated ``theta = E nu(T*)`` and the identification ratio."""
    _check_completeness(model)
    tau, k = model.tau, model.k
    times = np.arange(1, k + 1)
    nu_vals = (times > 1).astype(float) if nu is None else np.asarray([nu(t) for t in times], dtype=float)
    p = model.joint()
    q_grid = np.arange(tau)[:, None]
    t_grid = times[None, :]

    bridge = np.ones((k + 1, 2))
    max_res = 0.0
    for t in range(tau - 1, 0, -1):
        at_risk = ((q_grid <= t) & (t < t_grid)).astype(float)
        before = ((q_grid < t) & (t < t_grid)).astype(float)
        # mass by (w1, w2) over the risk set, and with Q < t
        m_risk = np.einsum("uabqt,qt->ab", p, at_risk)
        m_before = np.einsum("uabqt,qt->ab", p, before)
        nxt = bridge[t + 1]
        a_mat = (m_before * nxt[:, None]).T  # rows w2, cols w1
        rhs = (m_risk * nxt[:, None]).sum(axis=0)
        # best constant first, then the minimum-norm correction
        ones = np.ones(2)
        col = a_mat @ ones
        g_c = float(col @ rhs / (col @ col))
        g = g_c * ones + pseudo_inverse(a_mat, 1e-12) @ (rhs - g_c * col)
        max_res = max(max_res, float(np.abs(a_mat @ g - rhs).max() / max(np.abs(rhs).max(), 1e-300)))
        bridge[t] = nxt * g

    theta = float(model.p_u @ model.p_t_u @ nu_vals)
    observed = (q_grid < t_grid).astype(float)
    m_obs = np.einsum("uabqt,qt->at", p, observed)  # (w1, t)
    b_t = bridge[1:].T  # (w1, t)
    num = float(np.sum(m_obs * b_t * nu_vals[None, :]))
    den = float(np.sum(m_obs * b_t))
    return DiscreteOracleResult(bridge, theta, num / den, max_res)


def marginal_entry_cdf_before(model: DiscreteModel) -> np.ndarray:
    """``P(Q* < t)`` for ``t = 0..K``."""
    pq = np.einsum("u,ua,uaq->q", model.p_u, model.p_w1_u, model.p_q_uw1)
    cdf = np.concatenate(([0.0], np.cumsum(pq)))
    out = np.ones(model.k + 1)
    out[: model.tau + 1] = cdf[: model.tau + 1]
    return out
