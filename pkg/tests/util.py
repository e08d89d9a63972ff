"""Shared helpers for the test suite."""

import numpy as np

from cassini_stab.pseries import PoissonSeries, TruncationPolicy


def random_series(rng, n_terms=20, max_deg=6, trunc=None, coeff_scale=1.0):
    """Random series respecting the usual parity/wave bounds, so that
    brackets between generated series stay polynomial."""
    if trunc is None:
        trunc = TruncationPolicy(32, 32, 8)
    terms = []
    for _ in range(n_terms):
        m1 = int(rng.integers(0, max_deg + 1))
        m3 = int(rng.integers(0, max_deg + 1 - m1))
        k1 = int(rng.integers(-m1, m1 + 1))
        if (k1 - m1) % 2:
            k1 += 1 if k1 < m1 else -1
        k3 = int(rng.integers(-m3, m3 + 1))
        if (k3 - m3) % 2:
            k3 += 1 if k3 < m3 else -1
        kind = "cos" if (k1 == 0 and k3 == 0) else ("cos", "sin")[int(rng.integers(2))]
        coeff = float(rng.normal()) * coeff_scale
        if coeff == 0.0:
            coeff = 1e-3
        terms.append((coeff, (m1, m3), kind, (k1, k3)))
    return PoissonSeries.from_terms(terms, trunc)


def series_close(a, b, rel=1e-12):
    """Max absolute coefficient of a-b, relative to the scale of a and b."""
    diff = a - b
    scale = max(a.max_abs_coeff(), b.max_abs_coeff(), 1e-300)
    return diff.max_abs_coeff() <= rel * scale


def random_point(rng, action_scale=1.0):
    U = (float(rng.uniform(0.05, 1.0)) * action_scale,
         float(rng.uniform(0.05, 1.0)) * action_scale)
    u = (float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi)))
    return U, u
