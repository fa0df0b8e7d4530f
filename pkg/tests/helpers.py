"""Shared generators for tests."""

import numpy as np

from proxtrunc.data import Dataset


def random_dataset(rng, n=200, d1=1, d2=1, dz=1, censor=True, ties=False):
    """Random left-truncated, right-censored data with loosely related proxies."""
    u = rng.normal(size=n)
    z = rng.normal(size=(n, dz))
    w1 = u[:, None] + rng.normal(size=(n, d1))
    w2 = u[:, None] + rng.normal(size=(n, d2))
    q = rng.exponential(1.0, n) * np.exp(0.3 * u)
    if ties:
        q = np.round(q, 1)
    t = q + rng.exponential(1.5, n)
    if censor:
        c = q + rng.exponential(3.0, n)
        x = np.minimum(t, c)
        delta = (t <= c).astype(int)
    else:
        x, delta = t, np.ones(n, dtype=int)
    return Dataset.from_arrays(q=q, x=x, delta=delta, w1=w1, w2=w2, z=z)
