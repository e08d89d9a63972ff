import math

import numpy as np
import pytest

from cassini_stab.errors import DomainError
from cassini_stab.orbexp import EccExpansion, kepler_expansions, numeric_kepler

E_TITAN = 0.0289


@pytest.fixture(scope="module")
def expansions():
    return kepler_expansions(8)


def dft_oracle(e, n=4096):
    """Newton-solve Kepler on a uniform mean-anomaly grid, then DFT."""
    l = 2.0 * np.pi * np.arange(n) / n
    ar3 = np.empty(n)
    cosv = np.empty(n)
    sinv = np.empty(n)
    for i, li in enumerate(l):
        r_over_a, v = numeric_kepler(e, li)
        ar3[i] = r_over_a**-3
        cosv[i] = math.cos(v)
        sinv[i] = math.sin(v)
    out = {}
    for name, vals in (("ar3", ar3), ("cosv", cosv), ("sinv", sinv)):
        F = np.fft.rfft(vals) / n
        out[name] = {"cos": 2.0 * F.real, "sin": -2.0 * F.imag}
        out[name]["cos"][0] *= 0.5
    return out


class TestNumericKepler:
    def test_circular(self):
        assert numeric_kepler(0.0, 1.0) == pytest.approx((1.0, 1.0))

    def test_perihelion(self):
        r, v = numeric_kepler(E_TITAN, 0.0)
        assert r == pytest.approx(1.0 - E_TITAN, abs=1e-15)
        assert v == pytest.approx(0.0, abs=1e-14)

    def test_aphelion_symmetry(self):
        r, v = numeric_kepler(0.5, math.pi)
        assert r == pytest.approx(1.5, abs=1e-14)
        assert v == pytest.approx(math.pi, abs=1e-13)

    def test_residual_tolerance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            e = rng.uniform(0, 0.85)
            l = rng.uniform(-10, 10)
            r_over_a, v = numeric_kepler(e, l)
            # reconstruct E from v and check Kepler's equation directly
            E = 2.0 * math.atan2(math.sqrt(1 - e) * math.sin(v / 2),
                                 math.sqrt(1 + e) * math.cos(v / 2))
            E += 2.0 * math.pi * round((v - E) / (2 * math.pi))
            assert abs(E - e * math.sin(E) - l) <= 1e-13
            assert r_over_a == pytest.approx(1.0 - e * math.cos(E), abs=1e-13)

    def test_invalid_eccentricity(self):
        with pytest.raises(DomainError):
            numeric_kepler(1.0, 0.3)
        with pytest.raises(DomainError):
            numeric_kepler(-0.1, 0.3)


class TestExpansions:
    def test_circular_limit(self, expansions):
        ar3, cosv, sinv = expansions
        assert ar3.fourier_coefficient(0.0, 0, "cos") == pytest.approx(1.0)
        assert cosv.fourier_coefficient(0.0, 1, "cos") == pytest.approx(1.0)
        assert sinv.fourier_coefficient(0.0, 1, "sin") == pytest.approx(1.0)
        for exp in expansions:
            for (p, k, kind), c in exp.series.items():
                if p == 0:
                    assert (k, kind) in {(0, "cos"), (1, "cos"), (1, "sin")}

    def test_mean_value_closed_form(self, expansions):
        # <(a/r)^3> over mean anomaly equals (1 - e^2)^(-3/2)
        ar3 = expansions[0]
        mean = ar3.fourier_coefficient(E_TITAN, 0, "cos")
        assert abs(mean - (1.0 - E_TITAN**2) ** -1.5) < 1e-12
        # and the quadrature oracle agrees
        l = 2.0 * np.pi * (np.arange(4096) + 0.5) / 4096
        vals = [numeric_kepler(E_TITAN, li)[0] ** -3 for li in l]
        assert mean == pytest.approx(np.mean(vals), abs=1e-12)

    def test_all_fourier_coefficients_against_dft(self, expansions):
        oracle = dft_oracle(E_TITAN)
        names = ("ar3", "cosv", "sinv")
        for name, exp in zip(names, expansions):
            table = oracle[name]
            for k in range(0, 12):
                for kind in ("cos", "sin"):
                    want = table[kind][k] if k < len(table[kind]) else 0.0
                    got = exp.fourier_coefficient(E_TITAN, k, kind)
                    assert got == pytest.approx(want, abs=1e-10), (name, k, kind)

    def test_pythagorean_identity_pointwise(self, expansions):
        _, cosv, sinv = expansions
        rng = np.random.default_rng(1)
        for _ in range(100):
            l = rng.uniform(0, 2 * np.pi)
            s = cosv.evaluate(E_TITAN, l) ** 2 + sinv.evaluate(E_TITAN, l) ** 2
            assert abs(s - 1.0) < 1e-12

    def test_pythagorean_identity_coefficients(self, expansions):
        # cos^2 v + sin^2 v - 1: every coefficient below e^9 vanishes
        _, cosv, sinv = expansions

        def to_complex(exp):
            out = {}
            for (p, k, kind), c in exp.series.items():
                if kind == "cos":
                    out[(p, k)] = out.get((p, k), 0j) + c / 2
                    out[(p, -k)] = out.get((p, -k), 0j) + c / 2
                else:
                    out[(p, k)] = out.get((p, k), 0j) + c / (2j)
                    out[(p, -k)] = out.get((p, -k), 0j) - c / (2j)
            return {k: v for k, v in out.items() if v != 0}

        def mul(a, b):
            out = {}
            for (pa, ka), ca in a.items():
                for (pb, kb), cb in b.items():
                    if pa + pb > 8:
                        continue
                    key = (pa + pb, ka + kb)
                    out[key] = out.get(key, 0j) + ca * cb
            return out

        c2 = mul(to_complex(cosv), to_complex(cosv))
        s2 = mul(to_complex(sinv), to_complex(sinv))
        total = {}
        for d in (c2, s2):
            for k, v in d.items():
                total[k] = total.get(k, 0j) + v
        total[(0, 0)] -= 1.0
        for key, val in total.items():
            assert abs(val) < 1e-12, key

    def test_parity(self, expansions):
        ar3, cosv, sinv = expansions
        assert all(kind == "cos" for (_, _, kind) in ar3.series)
        assert all(kind == "cos" for (_, _, kind) in cosv.series)
        assert all(kind == "sin" for (_, _, kind) in sinv.series)

    def test_dalembert_invariants(self, expansions):
        for exp in expansions:
            exp.check_invariants()

    def test_known_leading_coefficients(self):
        # (a/r)^3 = 1 + 3 e cos l + e^2 (3/2 + 9/2 cos 2l) + O(e^3)
        ar3, cosv, _ = kepler_expansions(4)
        assert ar3.series[(1, 1, "cos")] == pytest.approx(3.0)
        assert ar3.series[(2, 0, "cos")] == pytest.approx(1.5)
        assert ar3.series[(2, 2, "cos")] == pytest.approx(4.5)
        # cos v = cos l + e (cos 2l - 1) + ...
        assert cosv.series[(1, 0, "cos")] == pytest.approx(-1.0)
        assert cosv.series[(1, 2, "cos")] == pytest.approx(1.0)

    def test_truncation_bounds(self):
        with pytest.raises(DomainError):
            kepler_expansions(0)
        with pytest.raises(DomainError):
            kepler_expansions(13)

    def test_text_round_trip(self, expansions):
        ar3 = expansions[0]
        back = EccExpansion.from_text(ar3.to_text(), 8, 0)
        assert back.series == ar3.series
