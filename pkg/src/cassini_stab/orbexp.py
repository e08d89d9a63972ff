"""Eccentricity expansions of the two-body kinematic functions.

Produces the truncated Fourier series in mean anomaly, with polynomial
eccentricity coefficients, of the three functions that feed the tidal
potential: (a/r)^3, cos(v) and sin(v), where v is the true anomaly.  The
expansions are generated programmatically by series inversion of Kepler's
equation rather than hard-coded, so any truncation order up to the
storage limit can be requested and validated against the numeric solver
in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError, KeplerConvergenceError

_MAX_ECC_DEGREE = 12


# -- internal complex Fourier/eccentricity series -------------------------
#
# A series is a dict {(p, k): complex} meaning sum c * e^p * exp(i k l).
# Real functions keep c(p, -k) = conj(c(p, k)).


def _mul(a: dict, b: dict, max_p: int) -> dict:
    out: dict = {}
    for (pa, ka), ca in a.items():
        for (pb, kb), cb in b.items():
            p = pa + pb
            if p > max_p:
                continue
            key = (p, ka + kb)
            out[key] = out.get(key, 0.0j) + ca * cb
    return {k: v for k, v in out.items() if v != 0.0}


def _add(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0j) + v
    return {k: v for k, v in out.items() if v != 0.0}


def _scale(a: dict, c: complex) -> dict:
    return {k: c * v for k, v in a.items()}


def _conj(a: dict) -> dict:
    return {(p, -k): v.conjugate() for (p, k), v in a.items()}


def _exp_i(s: dict, max_p: int) -> dict:
    # exp(i*s) for s = O(e); the power series terminates at order max_p
    out = {(0, 0): 1.0 + 0.0j}
    term = {(0, 0): 1.0 + 0.0j}
    i_s = _scale(s, 1j)
    for n in range(1, max_p + 1):
        term = _scale(_mul(term, i_s, max_p), 1.0 / n)
        if not term:
            break
        out = _add(out, term)
    return out


def _kepler_series(max_p: int):
    """Complex series for exp(iE), cos E, sin E with E the eccentric
    anomaly, obtained by iterating E = l + e sin E."""
    e_mono = {(1, 0): 1.0 + 0.0j}
    s: dict = {}  # S = E - l
    for _ in range(max_p + 1):
        z = _mul({(0, 1): 1.0 + 0.0j}, _exp_i(s, max_p), max_p)
        sin_e = _scale(_add(z, _scale(_conj(z), -1.0)), -0.5j)
        s = _mul(e_mono, sin_e, max_p)
    z = _mul({(0, 1): 1.0 + 0.0j}, _exp_i(s, max_p), max_p)
    cos_e = _scale(_add(z, _conj(z)), 0.5)
    sin_e = _scale(_add(z, _scale(_conj(z), -1.0)), -0.5j)
    return cos_e, sin_e


def _reciprocal_one_minus(x: dict, max_p: int) -> dict:
    # 1/(1 - x) with x = O(e): geometric series, exact under truncation
    out = {(0, 0): 1.0 + 0.0j}
    term = {(0, 0): 1.0 + 0.0j}
    for _ in range(max_p):
        term = _mul(term, x, max_p)
        if not term:
            break
        out = _add(out, term)
    return out


def _sqrt_one_minus_e2(max_p: int) -> dict:
    # binomial series sum_m binom(1/2, m) (-e^2)^m
    out: dict = {}
    for m in range(0, max_p // 2 + 1):
        b = math.comb(2 * m, m) / ((1 - 2 * m) * (-4) ** m)  # binom(1/2, m)
        out[(2 * m, 0)] = complex(b * (-1) ** m)
    return out


@dataclass(frozen=True)
class EccExpansion:
    """Truncated expansion sum c * e^p * {cos|sin}(k * l).

    ``series`` maps (p, k, kind) to the coefficient, with kind "cos" or
    "sin", k >= 0 and p <= max_ecc_degree.  ``offset`` is the base
    harmonic of the expanded function (0 for (a/r)^3, 1 for cos v and
    sin v), entering the d'Alembert bound |k| <= p + offset.
    """

    series: dict
    max_ecc_degree: int
    offset: int

    def evaluate(self, e: float, l: float) -> float:
        total = 0.0
        for (p, k, kind), c in self.series.items():
            trig = math.cos(k * l) if kind == "cos" else math.sin(k * l)
            total += c * e**p * trig
        return total

    def fourier_coefficient(self, e: float, k: int, kind: str) -> float:
        """Numeric Fourier coefficient of harmonic (k, kind) at fixed e."""
        return sum(c * e**p for (p, kk, kd), c in self.series.items()
                   if kk == k and kd == kind)

    def harmonics(self):
        return sorted({(k, kind) for (_, k, kind) in self.series})

    def check_invariants(self) -> None:
        for (p, k, kind) in self.series:
            if p > self.max_ecc_degree:
                raise DomainError("eccentricity power above truncation")
            if abs(k) - self.offset > p:
                raise DomainError(
                    f"d'Alembert violation: harmonic {k} at e-power {p}")
            if (abs(abs(k) - self.offset) - p) % 2:
                raise DomainError(
                    f"d'Alembert parity violation at (p={p}, k={k})")

    def to_text(self) -> str:
        rows = sorted(self.series.items(), key=lambda it: (it[0][0], it[0][1],
                                                           it[0][2]))
        return "\n".join(f"{c!r} {p} {k} {kind}" for (p, k, kind), c in rows) + "\n"

    @classmethod
    def from_text(cls, text: str, max_ecc_degree: int, offset: int) -> "EccExpansion":
        series = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            c, p, k, kind = line.split()
            series[(int(p), int(k), kind)] = float(c)
        return cls(series, max_ecc_degree, offset)


def _to_real(series: dict, max_ecc_degree: int, offset: int,
             tol: float = 1e-15) -> EccExpansion:
    out = {}
    for (p, k), c in series.items():
        if k < 0:
            continue
        if k == 0:
            cos_c, sin_c = c.real, 0.0
            if abs(c.imag) > tol:
                raise DomainError("non-real zero-harmonic coefficient")
        else:
            cos_c, sin_c = 2.0 * c.real, -2.0 * c.imag
        for kind, val in (("cos", cos_c), ("sin", sin_c)):
            if abs(val) > tol:
                out[(p, k, kind)] = val
    return EccExpansion(out, max_ecc_degree, offset)


@lru_cache(maxsize=8)
def kepler_expansions(max_ecc_degree: int):
    """Expansions of (a/r)^3, cos(v), sin(v) truncated at the given
    eccentricity degree.

    Returns
    -------
    (EccExpansion, EccExpansion, EccExpansion)
        The three expansions, each validated against the d'Alembert
        bounds before being returned.
    """
    if not 1 <= max_ecc_degree <= _MAX_ECC_DEGREE:
        raise DomainError(
            f"max_ecc_degree must be in [1, {_MAX_ECC_DEGREE}]")
    N = max_ecc_degree
    cos_e, sin_e = _kepler_series(N)
    e_mono = {(1, 0): 1.0 + 0.0j}
    x = _mul(e_mono, cos_e, N)  # e cos E
    a_over_r = _reciprocal_one_minus(x, N)
    ar3 = _mul(_mul(a_over_r, a_over_r, N), a_over_r, N)
    cos_v = _mul(_add(cos_e, _scale(e_mono, -1.0)), a_over_r, N)
    sin_v = _mul(_mul(_sqrt_one_minus_e2(N), sin_e, N), a_over_r, N)
    out = (_to_real(ar3, N, 0), _to_real(cos_v, N, 1), _to_real(sin_v, N, 1))
    for exp in out:
        exp.check_invariants()
    return out


def numeric_kepler(e: float, l_o: float):
    """Solve Kepler's equation and return (r/a, true anomaly).

    Newton iteration on E - e sin E = l_o to |residual| <= 1e-14; the
    true anomaly is returned on the same 2*pi branch as the eccentric
    anomaly, so quadrants are correct for any mean anomaly.
    """
    if not 0.0 <= e < 1.0:
        raise DomainError(f"eccentricity must be in [0, 1), got {e}")
    E = l_o + e * math.sin(l_o)
    for _ in range(50):
        f = E - e * math.sin(E) - l_o
        if abs(f) <= 1e-14:
            break
        E -= f / (1.0 - e * math.cos(E))
    else:
        raise KeplerConvergenceError(
            f"no convergence for e={e}, l={l_o}: residual {f:.2e}")
    r_over_a = 1.0 - e * math.cos(E)
    v = 2.0 * math.atan2(math.sqrt(1.0 + e) * math.sin(0.5 * E),
                         math.sqrt(1.0 - e) * math.cos(0.5 * E))
    # keep v on the branch of E (atan2 wraps to (-pi, pi])
    v += 2.0 * math.pi * round((E - v) / (2.0 * math.pi))
    return r_over_a, v
