"""Local analysis around the Cassini state.

Pipeline stages: locate the equilibrium of the averaged Hamiltonian,
Taylor-expand around it in the translated pair variables, remove the
mixed quadratic terms with the linear "untangling" change, rescale to
polar action-angle variables and linearize the trigonometric powers,
producing the Taylor-Fourier Hamiltonian consumed by the normal-form
machinery.

For performance the full-degree expansion is built directly in the
untangled (primed) variables: the substitution is linear, so composing it
into the expansion inputs is exact and avoids re-expanding a large
polynomial.  The spec-level ``taylor_expand`` and ``untangle`` operations
are the same engine run unprimed plus an honest polynomial substitution,
and the two routes are cross-checked in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import convolve2d

from .errors import (
    DomainError,
    EquilibriumNotFoundError,
    InconsistentEquilibriumError,
    NotEllipticError,
    UntanglingFailedError,
)
from .model import HamiltonianModel
from .pseries import Poly4, PoissonSeries, TruncationPolicy

DEFAULT_PRUNE_REL = 1e-12


@dataclass(frozen=True)
class CassiniState:
    """Equilibrium actions of the averaged Hamiltonian at zero resonant
    angles, with the associated obliquity and the final Newton residual
    (scaled by the mean motion)."""

    Sigma1_star: float
    Sigma3_star: float
    K_star: float
    gradient_residual: float

    def __post_init__(self):
        if not 0.0 <= self.K_star < 0.5 * math.pi:
            raise DomainError(f"equilibrium obliquity {self.K_star} out of range")


@dataclass(frozen=True)
class Linearization:
    """Diagonalized quadratic data: oscillator coefficients after the
    untangling substitution, the substitution parameters, and the polar
    rescaling constants."""

    mu_S1S1: float
    mu_S1S3: float
    mu_S3S3: float
    mu_s1s1: float
    mu_s1s3: float
    mu_s3s3: float
    alpha: float
    beta: float
    U1_star: float
    U3_star: float
    omega: tuple

    def to_json_obj(self) -> dict:
        return {
            "mu_prime": {
                "S1S1": self.mu_S1S1, "S1S3": self.mu_S1S3,
                "S3S3": self.mu_S3S3, "s1s1": self.mu_s1s1,
                "s1s3": self.mu_s1s3, "s3s3": self.mu_s3s3,
            },
            "alpha": self.alpha, "beta": self.beta,
            "U1_star": self.U1_star, "U3_star": self.U3_star,
            "omega": list(self.omega),
        }


# -- dense bivariate power series ----------------------------------------


class Series2:
    """Truncated power series in two variables (dense array storage)."""

    __slots__ = ("a", "deg")

    def __init__(self, a, deg):
        self.a = a
        self.deg = deg

    @classmethod
    def zeros(cls, deg):
        return cls(np.zeros((deg + 1, deg + 1)), deg)

    @classmethod
    def const(cls, value, deg):
        s = cls.zeros(deg)
        s.a[0, 0] = value
        return s

    @classmethod
    def linear(cls, c0, cx, cy, deg):
        s = cls.zeros(deg)
        s.a[0, 0] = c0
        if deg >= 1:
            s.a[1, 0] = cx
            s.a[0, 1] = cy
        return s

    def _masked(self):
        i, j = np.indices(self.a.shape)
        out = self.a.copy()
        out[i + j > self.deg] = 0.0
        return Series2(out, self.deg)

    def __add__(self, other):
        return Series2(self.a + other.a, self.deg)

    def __sub__(self, other):
        return Series2(self.a - other.a, self.deg)

    def scale(self, c):
        return Series2(self.a * c, self.deg)

    def mul(self, other):
        full = convolve2d(self.a, other.a)[: self.deg + 1, : self.deg + 1]
        return Series2(full, self.deg)._masked()

    def recip(self):
        """1/self by Newton iteration; needs a nonzero constant term."""
        a0 = self.a[0, 0]
        if a0 == 0.0:
            raise DomainError("series reciprocal needs nonzero constant term")
        x = Series2.const(1.0 / a0, self.deg)
        two = Series2.const(2.0, self.deg)
        correct = 0
        while correct < self.deg:
            x = x.mul(two - self.mul(x))
            correct = 2 * correct + 1
        return x

    def sqrt(self):
        """Square root by division-free inverse-sqrt Newton iteration;
        needs a positive constant term."""
        a0 = self.a[0, 0]
        if not a0 > 0.0:
            raise DomainError("series sqrt needs positive constant term")
        y = Series2.const(1.0 / math.sqrt(a0), self.deg)
        three = Series2.const(3.0, self.deg)
        correct = 0
        while correct < self.deg:
            y = y.mul(three - self.mul(y.mul(y))).scale(0.5)
            correct = 2 * correct + 1
        return self.mul(y)

    def evaluate(self, x, y):
        xp = x ** np.arange(self.deg + 1)
        yp = y ** np.arange(self.deg + 1)
        return float(xp @ self.a @ yp)


def _cos_linear_form(w1: float, w3: float, deg: int) -> Series2:
    """cos(w1*x + w3*y) as a truncated polynomial."""
    out = Series2.zeros(deg)
    for m in range(0, deg + 1, 2):
        sign_fact = (-1.0) ** (m // 2) / math.factorial(m)
        for a in range(m + 1):
            out.a[a, m - a] += (sign_fact * math.comb(m, a)
                                * w1**a * w3 ** (m - a))
    return out


# -- equilibrium ----------------------------------------------------------


def solve_cassini(H: HamiltonianModel, seed=None, max_iter: int = 100,
                  tol: float = 1e-13) -> CassiniState:
    """Newton iteration on the action gradient at zero resonant angles.

    Seeded at (1, 1 - cos i); the residual is scaled by the mean motion.
    Raises ``EquilibriumNotFoundError`` when the iteration does not
    converge, which in parameter scans marks a hole.
    """
    n_o = H.n_o
    x = np.array(seed if seed is not None
                 else (1.0, 1.0 - math.cos(H.params.i)), dtype=float)

    def grad(p):
        return np.array(H.grad_actions(p[0], p[1]))

    g = grad(x)
    for _ in range(max_iter):
        if np.max(np.abs(g)) <= tol * n_o:
            break
        J = np.empty((2, 2))
        for j in range(2):
            h = 1e-8 * max(abs(x[j]), 1e-4 if j == 0 else 1e-7)
            xp = x.copy(); xp[j] += h
            xm = x.copy(); xm[j] -= h
            J[:, j] = (grad(xp) - grad(xm)) / (2.0 * h)
        try:
            step = np.linalg.solve(J, g)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(J, g, rcond=None)
        xn = x - step
        halvings = 0
        while (xn[0] <= 0.0 or xn[1] < 0.0 or xn[1] >= 2.0 * xn[0]) and halvings < 60:
            step *= 0.5
            xn = x - step
            halvings += 1
        x = xn
        g = grad(x)
    else:
        raise EquilibriumNotFoundError(
            f"Newton did not converge: residual {np.max(np.abs(g)):.3e}")
    cK = 1.0 - x[1] / x[0]
    return CassiniState(Sigma1_star=float(x[0]), Sigma3_star=float(x[1]),
                        K_star=math.acos(min(1.0, max(-1.0, cK))),
                        gradient_residual=float(np.max(np.abs(g)) / n_o))


# -- Taylor expansion engine ----------------------------------------------


def _expansion_tensor(H: HamiltonianModel, eq: CassiniState, deg: int,
                      alpha: float, beta: float) -> np.ndarray:
    """Coefficient tensor T[dS1', dS3', s1', s3'] of the Hamiltonian
    expanded around the equilibrium in (possibly untangled) variables."""
    ab = alpha * beta
    S1 = Series2.linear(eq.Sigma1_star, 1.0 - ab, -alpha, deg)
    S3 = Series2.linear(eq.Sigma3_star, beta, 1.0, deg)
    t = S3.mul(S1.recip())  # 1 - cos K, built cancellation-free
    cK = Series2.const(1.0, deg) - t
    pot = H.potential.total
    need_sK = any(q for kp in pot.terms.values() for (_, q) in kp)
    sK = None
    if need_sK:
        sk2 = t.mul(Series2.const(2.0, deg) - t)
        if not sk2.a[0, 0] > 0.0:
            raise NotEllipticError(
                "zero equilibrium obliquity with odd obliquity forcing")
        sK = sk2.sqrt()

    max_ck = max((p for kp in pot.terms.values() for (p, _) in kp), default=0)
    ck_pow = [Series2.const(1.0, deg)]
    for _ in range(max_ck):
        ck_pow.append(ck_pow[-1].mul(cK))

    n = deg + 1
    tensor = np.zeros((n, n, n, n))
    for (j1, j3), kp in pot.terms.items():
        coeff = Series2.zeros(deg)
        for (p, q), v in kp.items():
            term = ck_pow[p].scale(v)
            if q:
                term = term.mul(sK)
            coeff = coeff + term
        w1 = j1 + alpha * j3
        w3 = -beta * j1 + (1.0 - ab) * j3
        cpoly = _cos_linear_form(w1, w3, deg)
        tensor += np.einsum("ij,kl->ijkl", coeff.a, cpoly.a)

    n_o = H.n_o
    kin = (S1.mul(S1).scale(0.5 * n_o) - S1.scale(n_o)
           + S3.scale(H.Omega_dot))
    tensor[:, :, 0, 0] += kin.a

    idx = np.indices((n, n, n, n)).sum(axis=0)
    tensor[idx > deg] = 0.0
    return tensor


def _tensor_to_poly4(tensor: np.ndarray, deg: int,
                     trunc: TruncationPolicy) -> Poly4:
    n = tensor.shape[0]
    scale = np.abs(tensor[_quad_indices(n)]).max()
    lin = max(abs(tensor[1, 0, 0, 0]), abs(tensor[0, 1, 0, 0]),
              abs(tensor[0, 0, 1, 0]), abs(tensor[0, 0, 0, 1]))
    if lin > 1e-10 * max(scale, 1e-300):
        raise InconsistentEquilibriumError(
            f"linear terms {lin:.3e} survive the expansion (scale {scale:.3e})")
    tensor = tensor.copy()
    tensor[0, 0, 0, 0] = 0.0
    tensor[1, 0, 0, 0] = tensor[0, 1, 0, 0] = 0.0
    tensor[0, 0, 1, 0] = tensor[0, 0, 0, 1] = 0.0
    a, b, c, d = np.nonzero(tensor)
    keep = a + b + c + d <= deg
    a, b, c, d = a[keep], b[keep], c[keep], d[keep]
    vals = tensor[a, b, c, d]
    return Poly4.from_monomials(
        [((int(a[i]), int(b[i]), int(c[i]), int(d[i])), float(vals[i]))
         for i in range(a.size)], trunc)


def _quad_indices(n):
    out = ([2, 1, 0, 0, 0, 0], [0, 1, 2, 0, 0, 0],
           [0, 0, 0, 2, 1, 0], [0, 0, 0, 0, 1, 2])
    return tuple(np.array(ix) for ix in out)


def taylor_expand(H: HamiltonianModel, eq: CassiniState,
                  trunc: TruncationPolicy) -> Poly4:
    """Expansion of H around the equilibrium in the translated variables
    (dS1, dS3, s1, s3), constant dropped, to trunc.max_poly_degree.

    Linear terms above 1e-10 of the quadratic scale raise
    ``InconsistentEquilibriumError``.
    """
    deg = trunc.max_poly_degree
    tensor = _expansion_tensor(H, eq, deg, 0.0, 0.0)
    return _tensor_to_poly4(tensor, deg, trunc)


def quadratic_coefficients(q: Poly4) -> dict:
    """Quadratic part as the oscillator-coefficient dictionary, with the
    mixed entries halved (H0 = mu_S1S1 S1^2 + 2 mu_S1S3 S1 S3 + ...)."""
    return {
        "S1S1": q.coefficient((2, 0, 0, 0)),
        "S1S3": 0.5 * q.coefficient((1, 1, 0, 0)),
        "S3S3": q.coefficient((0, 2, 0, 0)),
        "s1s1": q.coefficient((0, 0, 2, 0)),
        "s1s3": 0.5 * q.coefficient((0, 0, 1, 1)),
        "s3s3": q.coefficient((0, 0, 0, 2)),
    }


def _solve_untangling(mu: dict, max_iter: int = 60) -> tuple:
    """Newton solve of the two decoupling conditions from seed (0, 0),
    which selects the branch continued from the identity."""
    mS11, mS13, mS33 = mu["S1S1"], mu["S1S3"], mu["S3S3"]
    ms11, ms13, ms33 = mu["s1s1"], mu["s1s3"], mu["s3s3"]
    scale = max(abs(v) for v in mu.values())
    if scale == 0.0:
        return 0.0, 0.0
    x = np.zeros(2)
    for _ in range(max_iter):
        al, be = x
        F = np.array([
            be * ms11 - (1 - 2 * al * be) * ms13 - al * (1 - al * be) * ms33,
            al * (1 - al * be) * mS11 - (1 - 2 * al * be) * mS13 - be * mS33,
        ])
        if np.max(np.abs(F)) <= 1e-14 * scale:
            return float(x[0]), float(x[1])
        J = np.array([
            [2 * be * ms13 - (1 - 2 * al * be) * ms33,
             ms11 + 2 * al * ms13 + al**2 * ms33],
            [(1 - 2 * al * be) * mS11 + 2 * be * mS13,
             -al**2 * mS11 + 2 * al * mS13 - mS33],
        ])
        try:
            x = x - np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise UntanglingFailedError(f"singular Jacobian: {exc}") from exc
    raise UntanglingFailedError(
        f"no convergence: residual {np.max(np.abs(F)):.3e} (scale {scale:.3e})")


def untangle(q: Poly4) -> tuple:
    """Solve for (alpha, beta) from the quadratic part of ``q`` and apply
    the untangling substitution to the full polynomial.

    Returns (alpha, beta, q') with the mixed quadratic terms of q'
    vanishing to rounding level.
    """
    mu = quadratic_coefficients(q)
    alpha, beta = _solve_untangling(mu)
    ab = alpha * beta
    M = np.array([
        [1.0 - ab, -alpha, 0.0, 0.0],
        [beta, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, -beta],
        [0.0, 0.0, alpha, 1.0 - ab],
    ])
    qp = q.substitute_linear(M)
    mup = quadratic_coefficients(qp)
    scale = max(abs(mup["S1S1"]), abs(mup["S3S3"]),
                abs(mup["s1s1"]), abs(mup["s3s3"]))
    if max(abs(mup["S1S3"]), abs(mup["s1s3"])) > 1e-12 * scale:
        raise UntanglingFailedError("mixed quadratic terms survive substitution")
    return alpha, beta, qp


# -- polar action-angle conversion ----------------------------------------


@lru_cache(maxsize=None)
def _harmonic_rows(m: int):
    """E[a, k+m] = coefficient of exp(i k u) in cos^a(u) sin^(m-a)(u)."""
    cos_arr = np.array([0.5, 0.0, 0.5], dtype=complex)
    sin_arr = np.array([0.5j, 0.0, -0.5j], dtype=complex)
    cos_pows = [np.array([1.0 + 0.0j])]
    sin_pows = [np.array([1.0 + 0.0j])]
    for _ in range(m):
        cos_pows.append(np.convolve(cos_pows[-1], cos_arr))
        sin_pows.append(np.convolve(sin_pows[-1], sin_arr))
    E = np.zeros((m + 1, 2 * m + 1), dtype=complex)
    for a in range(m + 1):
        row = np.convolve(cos_pows[a], sin_pows[m - a])
        pad = m - (row.size - 1) // 2
        E[a, pad: 2 * m + 1 - pad] = row
    return E


def to_action_angle(qprime: Poly4, alpha: float = 0.0, beta: float = 0.0,
                    prune_rel: float = DEFAULT_PRUNE_REL,
                    sqrtU_degree: int | None = None) -> tuple:
    """Rescale the untangled polynomial to polar action-angle variables
    and linearize all trigonometric powers.

    Within each (m1, m3) action profile, coefficients below ``prune_rel``
    of the profile's largest one are rounding residue of the exact
    cancellations performed here and are dropped.

    Returns (H0, Linearization) with H0 = omega . U + higher-degree terms.
    """
    mup = quadratic_coefficients(qprime)
    p1 = mup["S1S1"] * mup["s1s1"]
    p3 = mup["S3S3"] * mup["s3s3"]
    if not (p1 > 0.0 and p3 > 0.0):
        raise NotEllipticError(
            f"oscillator coefficient products not positive: {p1:.3e}, {p3:.3e}")
    U1s = math.sqrt(mup["S1S1"] / mup["s1s1"])
    U3s = math.sqrt(mup["S3S3"] / mup["s3s3"])
    omega = (math.copysign(2.0 * math.sqrt(p1), mup["S1S1"]),
             math.copysign(2.0 * math.sqrt(p3), mup["S3S3"]))
    lin = Linearization(
        mu_S1S1=mup["S1S1"], mu_S1S3=mup["S1S3"], mu_S3S3=mup["S3S3"],
        mu_s1s1=mup["s1s1"], mu_s1s3=mup["s1s3"], mu_s3s3=mup["s3s3"],
        alpha=alpha, beta=beta, U1_star=U1s, U3_star=U3s, omega=omega)

    deg_cap = sqrtU_degree if sqrtU_degree is not None else qprime.trunc.max_poly_degree
    trunc_out = TruncationPolicy(deg_cap, qprime.trunc.max_poly_degree,
                                 qprime.trunc.max_ecc_degree)

    a, b, c, d, vals = qprime.monomials()
    m1 = a + c
    m3 = b + d
    keep = m1 + m3 <= deg_cap
    a, b, c, d, vals, m1, m3 = (x[keep] for x in (a, b, c, d, vals, m1, m3))
    # polar prefactors: S1'^a s1'^c -> 2^(m1/2) U1*^((m1-2a)/2) U1^(m1/2) ...
    pref = (2.0 ** (0.5 * (m1 + m3))
            * U1s ** (0.5 * (m1 - 2 * a)) * U3s ** (0.5 * (m3 - 2 * b)))
    cvals = vals * pref

    group = m1 * 256 + m3
    order = np.argsort(group, kind="stable")
    a, b, m1, m3, cvals, group = (x[order] for x in (a, b, m1, m3, cvals, group))
    bounds = np.flatnonzero(np.diff(group)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [group.size]])

    out_m1, out_m3, out_kind, out_k1, out_k3, out_c = [], [], [], [], [], []
    for s, e in zip(starts, ends):
        gm1, gm3 = int(m1[s]), int(m3[s])
        C = np.zeros((gm1 + 1, gm3 + 1))
        C[a[s:e], b[s:e]] = cvals[s:e]
        E1 = _harmonic_rows(gm1)
        E3 = _harmonic_rows(gm3)
        R = np.einsum("ak,ab,bl->kl", E1, C, E3)
        # canonical fold: combine R[k] with conj(R[-k])
        for k1 in range(0, gm1 + 1):
            k3_lo = 0 if k1 == 0 else -gm3
            for k3 in range(k3_lo, gm3 + 1):
                v = R[k1 + gm1, k3 + gm3]
                if k1 == 0 and k3 == 0:
                    cos_c, sin_c = v.real, 0.0
                else:
                    w = v + np.conj(R[-k1 + gm1, -k3 + gm3])
                    cos_c, sin_c = w.real, -w.imag
                if cos_c != 0.0:
                    out_m1.append(gm1); out_m3.append(gm3); out_kind.append(0)
                    out_k1.append(k1); out_k3.append(k3); out_c.append(cos_c)
                if sin_c != 0.0 and (k1, k3) != (0, 0):
                    out_m1.append(gm1); out_m3.append(gm3); out_kind.append(1)
                    out_k1.append(k1); out_k3.append(k3); out_c.append(sin_c)

    H0 = PoissonSeries._from_raw(
        np.array(out_m1, np.int64), np.array(out_m3, np.int64),
        np.array(out_kind, np.int64), np.array(out_k1, np.int64),
        np.array(out_k3, np.int64), np.array(out_c, np.float64), trunc_out)
    H0 = prune_by_profile(H0, prune_rel)
    return H0, lin


def prune_by_profile(f: PoissonSeries, prune_rel: float) -> PoissonSeries:
    """Drop terms tiny relative to the largest coefficient sharing the
    same (m1, m3) action profile; raw coefficients within a profile are
    directly comparable because they weight the same action monomial."""
    if f.is_zero or prune_rel <= 0.0:
        return f
    m1, m3, kind, k1, k3, c = f.arrays()
    group = m1 * 256 + m3
    order = np.argsort(group, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    g_sorted = group[order]
    c_sorted = np.abs(c[order])
    bounds = np.flatnonzero(np.diff(g_sorted)) + 1
    starts = np.concatenate([[0], bounds])
    gmax = np.maximum.reduceat(c_sorted, starts)
    seg = np.zeros(order.size, np.int64)
    seg[starts] = 1
    seg = np.cumsum(seg) - 1
    keep_sorted = c_sorted >= prune_rel * gmax[seg]
    keep = keep_sorted[inv]
    return PoissonSeries(f._keys[keep], f._coeffs[keep], f.trunc,
                         f.dropped_mass, _validate=False)


# -- full pipeline ---------------------------------------------------------


@dataclass
class EquilibriumExpansion:
    """Everything produced by the local analysis around the equilibrium."""

    state: CassiniState
    quadratic: dict           # unprimed oscillator coefficients
    alpha: float
    beta: float
    poly: Poly4               # expansion in untangled variables
    H0: PoissonSeries         # Taylor-Fourier Hamiltonian
    lin: Linearization


def expand_around_equilibrium(H: HamiltonianModel, trunc: TruncationPolicy,
                              prune_rel: float = DEFAULT_PRUNE_REL,
                              seed=None) -> EquilibriumExpansion:
    """Run the full local pipeline: equilibrium, untangling parameters
    from the quadratic, direct expansion in untangled variables, and the
    polar action-angle conversion."""
    eq = solve_cassini(H, seed=seed)
    quad_trunc = TruncationPolicy(2, 2, trunc.max_ecc_degree)
    mu = quadratic_coefficients(
        _tensor_to_poly4(_expansion_tensor(H, eq, 2, 0.0, 0.0), 2, quad_trunc))
    alpha, beta = _solve_untangling(mu)
    deg = trunc.max_poly_degree
    tensor = _expansion_tensor(H, eq, deg, alpha, beta)
    poly = _tensor_to_poly4(tensor, deg, trunc)
    H0, lin = to_action_angle(poly, alpha, beta, prune_rel,
                              sqrtU_degree=trunc.max_sqrtU_degree)
    return EquilibriumExpansion(state=eq, quadratic=mu, alpha=alpha, beta=beta,
                                poly=poly, H0=H0, lin=lin)
