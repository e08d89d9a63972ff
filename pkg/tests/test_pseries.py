import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cassini_stab.errors import DomainError, SingularDerivativeError
from cassini_stab.pseries import (
    Poly4,
    PoissonSeries,
    TruncationPolicy,
    WeightVector,
    evaluate,
    multiply,
    poisson_bracket,
    weighted_norm,
)

from util import random_point, random_series, series_close

T8 = TruncationPolicy(8, 8, 8)
T32 = TruncationPolicy(32, 32, 8)


def S(terms, trunc=T32):
    return PoissonSeries.from_terms(terms, trunc)


class TestConstruction:
    def test_canonical_wave_sign(self):
        f = S([(2.0, (1, 1), "cos", (-1, 1))])
        (term,) = list(f)
        assert (term.k1, term.k3) == (1, -1)
        assert term.coeff == 2.0

    def test_canonical_wave_sign_sin_flips_coeff(self):
        f = S([(2.0, (1, 1), "sin", (-1, 1))])
        (term,) = list(f)
        assert (term.k1, term.k3) == (1, -1)
        assert term.coeff == -2.0

    def test_zero_wave_sin_forbidden(self):
        with pytest.raises(DomainError):
            S([(1.0, (2, 0), "sin", (0, 0))])

    def test_duplicate_terms_merge(self):
        f = S([(1.0, (2, 0), "cos", (0, 0)), (2.5, (2, 0), "cos", (0, 0))])
        assert len(f) == 1
        assert f.coefficient((2, 0), "cos", (0, 0)) == 3.5

    def test_zero_coefficients_not_stored(self):
        f = S([(1.0, (2, 0), "cos", (0, 0)), (-1.0, (2, 0), "cos", (0, 0))])
        assert f.is_zero

    def test_over_degree_rejected(self):
        with pytest.raises(DomainError):
            S([(1.0, (6, 3), "cos", (0, 0))], trunc=T8)

    def test_negative_exponent_rejected(self):
        with pytest.raises(SingularDerivativeError):
            S([(1.0, (-1, 0), "cos", (1, 0))])

    def test_canonicalization_idempotent(self):
        rng = np.random.default_rng(7)
        f = random_series(rng, 30)
        g = PoissonSeries.from_terms(
            [(t.coeff, (t.m1, t.m3), t.kind, (t.k1, t.k3)) for t in f], f.trunc
        )
        assert np.array_equal(f._keys, g._keys)
        assert np.array_equal(f._coeffs, g._coeffs)


class TestMultiply:
    def test_cos_squared(self):
        # product-to-sum identity: cos^2 u1 = 1/2 + 1/2 cos 2u1
        f = S([(1.0, (0, 0), "cos", (1, 0))])
        p = multiply(f, f, T8)
        assert len(p) == 2
        assert p.coefficient((0, 0), "cos", (0, 0)) == pytest.approx(0.5)
        assert p.coefficient((0, 0), "cos", (2, 0)) == pytest.approx(0.5)

    def test_identity_element(self):
        rng = np.random.default_rng(1)
        one = PoissonSeries.constant(1.0, T32)
        for _ in range(5):
            f = random_series(rng, 15)
            assert series_close(multiply(f, one, T32), f, rel=1e-15)

    def test_evaluation_oracle(self):
        # pointwise product of values vs value of the product series
        rng = np.random.default_rng(42)
        f = random_series(rng, 20, max_deg=6)
        g = random_series(rng, 20, max_deg=6)
        p = multiply(f, g, T32)  # 6+6 <= 32: no truncation loss
        assert p.dropped_mass == 0.0
        for _ in range(50):
            U, u = random_point(rng)
            lhs = p.evaluate(U, u)
            rhs = f.evaluate(U, u) * g.evaluate(U, u)
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_truncation_drops_and_counts(self):
        f = S([(1.0, (5, 0), "cos", (1, 0))], trunc=T8)
        g = S([(3.0, (4, 0), "cos", (0, 0))], trunc=T8)
        p = multiply(f, g, T8)
        assert p.is_zero
        assert p.dropped_mass == pytest.approx(3.0)

    def test_commutative_and_distributive(self):
        rng = np.random.default_rng(3)
        f = random_series(rng, 10, max_deg=5)
        g = random_series(rng, 10, max_deg=5)
        h = random_series(rng, 10, max_deg=5)
        assert series_close(multiply(f, g, T32), multiply(g, f, T32), rel=1e-14)
        lhs = multiply(f, g + h, T32)
        rhs = multiply(f, g, T32) + multiply(f, h, T32)
        assert series_close(lhs, rhs, rel=1e-14)

    def test_associative_up_to_truncation(self):
        rng = np.random.default_rng(4)
        f = random_series(rng, 8, max_deg=4)
        g = random_series(rng, 8, max_deg=4)
        h = random_series(rng, 8, max_deg=4)
        lhs = multiply(multiply(f, g, T32), h, T32)
        rhs = multiply(f, multiply(g, h, T32), T32)
        assert series_close(lhs, rhs, rel=1e-13)


class TestPoissonBracket:
    def test_action_with_cosine(self):
        # {U1, cos u1} = sin u1 under fdot = {f, H}
        U1 = S([(1.0, (2, 0), "cos", (0, 0))])
        f = S([(1.0, (0, 0), "cos", (1, 0))])
        b = poisson_bracket(U1, f, T32)
        assert len(b) == 1
        assert b.coefficient((0, 0), "sin", (1, 0)) == pytest.approx(1.0)

    def test_antisymmetry(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            f = random_series(rng, 12, max_deg=5)
            g = random_series(rng, 12, max_deg=5)
            fg = poisson_bracket(f, g, T32)
            gf = poisson_bracket(g, f, T32)
            assert series_close(fg, -gf, rel=1e-14)

    def test_self_bracket_vanishes(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            f = random_series(rng, 15, max_deg=6)
            b = poisson_bracket(f, f, T32)
            assert b.max_abs_coeff() <= 1e-13 * max(1.0, f.max_abs_coeff() ** 2)

    def test_jacobi_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(3):
            f = random_series(rng, 8, max_deg=4)
            g = random_series(rng, 8, max_deg=4)
            h = random_series(rng, 8, max_deg=4)
            r = (
                poisson_bracket(f, poisson_bracket(g, h, T32), T32)
                + poisson_bracket(g, poisson_bracket(h, f, T32), T32)
                + poisson_bracket(h, poisson_bracket(f, g, T32), T32)
            )
            scale = max(f.max_abs_coeff() * g.max_abs_coeff() * h.max_abs_coeff(), 1.0)
            assert r.max_abs_coeff() <= 1e-12 * scale

    def test_leibniz_rule(self):
        rng = np.random.default_rng(9)
        f = random_series(rng, 8, max_deg=4)
        g = random_series(rng, 8, max_deg=4)
        h = random_series(rng, 8, max_deg=4)
        lhs = poisson_bracket(f, multiply(g, h, T32), T32)
        rhs = multiply(poisson_bracket(f, g, T32), h, T32) + multiply(
            g, poisson_bracket(f, h, T32), T32
        )
        assert series_close(lhs, rhs, rel=1e-12)

    def test_bilinearity(self):
        rng = np.random.default_rng(10)
        f = random_series(rng, 10, max_deg=5)
        g = random_series(rng, 10, max_deg=5)
        h = random_series(rng, 10, max_deg=5)
        lhs = poisson_bracket(f.scale(2.0) + g, h, T32)
        rhs = poisson_bracket(f, h, T32).scale(2.0) + poisson_bracket(g, h, T32)
        assert series_close(lhs, rhs, rel=1e-13)

    def test_singular_input_raises(self):
        # cos(2 u1) with no action dependence cannot be bracketed against
        # a sqrt(U1) term without leaving polynomial land
        f = S([(1.0, (0, 0), "cos", (2, 0))])
        g = S([(1.0, (1, 0), "cos", (1, 0))])
        with pytest.raises(SingularDerivativeError):
            poisson_bracket(f, g, T32)

    def test_flow_convention(self):
        # with H = omega.U the angle increases: udot = {u-like, H} > 0;
        # check on f = sqrt(U1) sin u1, whose bracket with U1-linear H
        # is omega * sqrt(U1) cos u1
        H = S([(2.0, (2, 0), "cos", (0, 0))])
        f = S([(1.0, (1, 0), "sin", (1, 0))])
        fdot = poisson_bracket(f, H, T32)
        assert fdot.coefficient((1, 0), "cos", (1, 0)) == pytest.approx(2.0)


class TestWeightedNorm:
    def test_zero_series(self):
        assert weighted_norm(PoissonSeries.zero(T8), WeightVector(1, 1)) == 0.0

    def test_quadratic_fixture(self):
        # frequency-term arithmetic: |2.69 U1 + 2.375e-2 U3| at R = (1,1)
        f = S([(2.69, (2, 0), "cos", (0, 0)), (2.375e-2, (0, 2), "cos", (0, 0))])
        n = weighted_norm(f, WeightVector(1.0, 1.0))
        assert n == pytest.approx(2.71375, abs=1e-12)
        assert n == pytest.approx(2.714, abs=5e-4)

    def test_single_half_power(self):
        f = S([(3.0, (1, 0), "cos", (1, 0))])
        assert weighted_norm(f, WeightVector(4.0, 9.0)) == pytest.approx(6.0)

    def test_submultiplicative(self):
        rng = np.random.default_rng(11)
        R = WeightVector(0.7, 1.3)
        for _ in range(10):
            f = random_series(rng, 12, max_deg=5)
            g = random_series(rng, 12, max_deg=5)
            p = multiply(f, g, T32)
            assert weighted_norm(p, R) <= weighted_norm(f, R) * weighted_norm(g, R) * (
                1 + 1e-12
            )

    def test_majorant_dominates_values(self):
        rng = np.random.default_rng(12)
        R = WeightVector(0.5, 0.8)
        f = random_series(rng, 25, max_deg=6)
        norm = weighted_norm(f, R)
        for _ in range(200):
            u = rng.uniform(0, 2 * np.pi, 2)
            rho = rng.uniform(0, 1)
            U = (rho * R.R1, rho * R.R3)
            assert abs(f.evaluate(U, u)) <= norm * (1 + 1e-12)


class TestHomogeneousPart:
    def test_partition(self):
        rng = np.random.default_rng(13)
        f = random_series(rng, 40, max_deg=8)
        total = PoissonSeries.zero(f.trunc)
        for s in range(0, 9):
            total = total + f.homogeneous_part(s)
        assert series_close(total, f, rel=0.0)

    def test_exact_degree_selection(self):
        f = S([(1.0, (2, 0), "cos", (0, 0)), (2.0, (1, 2), "cos", (1, 0))])
        part = f.homogeneous_part(3)
        assert len(part) == 1
        assert part.coefficient((1, 2), "cos", (1, 0)) == 2.0


class TestEvaluate:
    def test_action_monomial(self):
        f = S([(1.0, (2, 0), "cos", (0, 0))])
        assert f.evaluate((2.0, 123.0), (0.3, 0.4)) == pytest.approx(2.0)

    def test_phase(self):
        f = S([(1.0, (0, 0), "cos", (2, -1))])
        assert f.evaluate((1.0, 1.0), (0.0, 0.0)) == pytest.approx(1.0)

    def test_negative_action_rejected(self):
        f = S([(1.0, (2, 0), "cos", (0, 0))])
        with pytest.raises(DomainError):
            f.evaluate((-1.0, 0.0), (0.0, 0.0))

    def test_evaluate_dispatcher(self):
        f = S([(2.0, (2, 0), "cos", (0, 0))])
        assert evaluate(f, ((1.5, 0.0), (0.0, 0.0))) == pytest.approx(3.0)
        q = Poly4.from_monomials([((1, 0, 0, 0), 2.0)], T8)
        assert evaluate(q, (1.5, 0.0, 0.0, 0.0)) == pytest.approx(3.0)


class TestSerialization:
    def test_text_round_trip_bit_exact(self):
        rng = np.random.default_rng(14)
        f = random_series(rng, 50, max_deg=7)
        g = PoissonSeries.from_text(f.to_text(), f.trunc)
        assert np.array_equal(f._keys, g._keys)
        assert np.array_equal(f._coeffs, g._coeffs)

    def test_json_round_trip_bit_exact(self):
        rng = np.random.default_rng(15)
        f = random_series(rng, 50, max_deg=7)
        blob = json.dumps(f.to_json_obj())
        g = PoissonSeries.from_json_obj(json.loads(blob), f.trunc)
        assert np.array_equal(f._keys, g._keys)
        assert np.array_equal(f._coeffs, g._coeffs)

    def test_text_ordering(self):
        f = S(
            [
                (1.0, (0, 2), "cos", (0, 0)),
                (2.0, (2, 0), "cos", (0, 0)),
                (3.0, (1, 0), "cos", (1, 0)),
            ]
        )
        lines = f.to_text().splitlines()
        # degree-1 term first, then degree-2 sorted by m1
        assert lines[0].endswith("1 0 cos 1 0")
        assert lines[1].endswith("0 2 cos 0 0")
        assert lines[2].endswith("2 0 cos 0 0")

    @given(
        st.lists(
            st.tuples(
                st.floats(
                    min_value=-1e6,
                    max_value=1e6,
                    allow_nan=False,
                    allow_infinity=False,
                ).filter(lambda x: x != 0.0),
                st.integers(0, 6),
                st.integers(0, 6),
                st.sampled_from(["cos", "sin"]),
                st.integers(-6, 6),
                st.integers(-6, 6),
            ),
            max_size=12,
        )
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, rows):
        terms = []
        for coeff, m1, m3, kind, k1, k3 in rows:
            if kind == "sin" and k1 == 0 and k3 == 0:
                kind = "cos"
            terms.append((coeff, (m1, m3), kind, (k1, k3)))
        f = PoissonSeries.from_terms(terms, TruncationPolicy(12, 12, 8))
        g = PoissonSeries.from_text(f.to_text(), f.trunc)
        assert np.array_equal(f._keys, g._keys)
        assert np.array_equal(f._coeffs, g._coeffs)


class TestDerivatives:
    def test_angle_derivative(self):
        f = S([(2.0, (2, 0), "cos", (2, 1))])
        d = f.derivative_angle(1)
        assert d.coefficient((2, 0), "sin", (2, 1)) == pytest.approx(-4.0)

    def test_action_derivative(self):
        f = S([(3.0, (4, 0), "cos", (2, 0))])
        d = f.derivative_action(1)
        assert d.coefficient((2, 0), "cos", (2, 0)) == pytest.approx(6.0)

    def test_action_derivative_singular(self):
        f = S([(1.0, (1, 0), "cos", (1, 0))])
        with pytest.raises(SingularDerivativeError):
            f.derivative_action(1)

    def test_constant_in_action_drops(self):
        f = S([(1.0, (0, 2), "cos", (0, 2))])
        assert f.derivative_action(1).is_zero


class TestPoly4:
    def test_multiply_and_evaluate(self):
        rng = np.random.default_rng(16)
        t = TruncationPolicy(8, 12, 8)
        p = Poly4.from_monomials([((1, 0, 0, 0), 2.0), ((0, 0, 1, 1), -1.0)], t)
        q = Poly4.from_monomials([((0, 1, 0, 0), 1.5), ((0, 0, 0, 0), 1.0)], t)
        prod = p.multiply(q, t)
        for _ in range(20):
            x = rng.normal(size=4)
            assert prod.evaluate(*x) == pytest.approx(
                p.evaluate(*x) * q.evaluate(*x), rel=1e-13, abs=1e-13
            )

    def test_substitute_linear_identity(self):
        t = TruncationPolicy(8, 8, 8)
        p = Poly4.from_monomials([((2, 1, 0, 1), 3.0), ((0, 0, 2, 0), -2.0)], t)
        q = p.substitute_linear(np.eye(4))
        assert q.coefficient((2, 1, 0, 1)) == 3.0
        assert q.coefficient((0, 0, 2, 0)) == -2.0

    def test_substitute_linear_matches_evaluation(self):
        rng = np.random.default_rng(17)
        t = TruncationPolicy(8, 10, 8)
        p = Poly4.from_monomials(
            [((2, 0, 1, 0), 1.0), ((0, 1, 0, 2), -0.5), ((1, 1, 1, 1), 0.25)], t
        )
        M = np.eye(4) + 0.1 * rng.normal(size=(4, 4))
        q = p.substitute_linear(M)
        for _ in range(20):
            xnew = rng.normal(size=4) * 0.3
            xold = M @ xnew
            assert q.evaluate(*xnew) == pytest.approx(
                p.evaluate(*xold), rel=1e-12, abs=1e-14
            )

    def test_homogeneous_part(self):
        t = TruncationPolicy(8, 8, 8)
        p = Poly4.from_monomials([((2, 0, 0, 0), 1.0), ((1, 1, 1, 0), 2.0)], t)
        assert len(p.homogeneous_part(2)) == 1
        assert len(p.homogeneous_part(3)) == 1
        assert p.homogeneous_part(4).is_zero

    def test_text_round_trip(self):
        t = TruncationPolicy(8, 8, 8)
        p = Poly4.from_monomials([((2, 0, 0, 1), math.pi), ((0, 0, 1, 0), -1.25)], t)
        q = Poly4.from_text(p.to_text(), t)
        assert np.array_equal(p._keys, q._keys)
        assert np.array_equal(p._coeffs, q._coeffs)
