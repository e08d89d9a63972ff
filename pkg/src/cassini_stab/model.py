"""Averaged resonant Hamiltonian of the synchronous spin-orbit problem.

Starting from the physical parameters of a triaxial body locked in a 1:1
spin-orbit resonance on a slowly precessing eccentric orbit (zero wobble),
this module composes the frame-rotation chain for the body-frame direction
of the perturber, multiplies in the orbital expansions, averages over the
fast orbital angle, and assembles

    H = n_o S1^2 / 2 - n_o S1 + Omega_dot S3 + <V>(S1, S3, s1, s3)

in units of rad/year.  The obliquity enters the averaged potential in
closed form through cos K = 1 - S3/S1, kept symbolic until the expansion
around the equilibrium; the coefficient of each (s1, s3) harmonic is a
low-degree polynomial in (cos K, sin K).

Averaging is implemented as an exact projection onto harmonics of the
resonant angles alone.  Terms that survive a plain fast-angle average but
still depend on the pericenter longitude (they are O(e^2 sin i sin K),
around 1e-9 rad/year for Titan-like parameters) are excluded from the
model by this projection and their total coefficient mass is reported in
the diagnostics, so the simplification is visible rather than silent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DomainError
from .orbexp import kepler_expansions
from .pseries import TruncationPolicy

G_SI_DEFAULT = 6.67430e-11  # m^3 kg^-1 s^-2
YEAR_SECONDS = 365.25 * 86400.0  # Julian year
_KM3_PER_KG_YR2 = 1e-9 * YEAR_SECONDS**2  # converts G from SI


@dataclass(frozen=True)
class BodyParams:
    """Physical inputs: central mass, gravity/shape coefficients of the
    rotating body, and its orbit.  Units: kg, km, rad, rad/year."""

    M: float
    J2: float
    C22: float
    C_norm: float  # C / (m Re^2)
    a: float
    e: float
    i: float
    Omega_dot: float
    n_o: float
    G_const: float = G_SI_DEFAULT

    def __post_init__(self):
        positive = {"M": self.M, "J2": self.J2, "C22": self.C22,
                    "C_norm": self.C_norm, "a": self.a, "n_o": self.n_o,
                    "G_const": self.G_const}
        for name, v in positive.items():
            if not v > 0.0:
                raise DomainError(f"{name} must be positive, got {v}")
        if not 0.0 <= self.e < 1.0:
            raise DomainError(f"e must be in [0, 1), got {self.e}")
        if not 0.0 <= self.i < 0.5 * math.pi:
            raise DomainError(f"i must be in [0, pi/2), got {self.i}")


@dataclass(frozen=True)
class DerivedParams:
    """Shape/strength combinations derived from the raw parameters."""

    gamma1: float
    gamma2: float
    n_o_star: float  # rad/year
    delta1: float
    delta2: float


def derive_params(p: BodyParams) -> DerivedParams:
    """gamma_1 = J2/C_norm, gamma_2 = 2 C22/C_norm, n_o* = sqrt(GM/a^3),
    delta_j = -(3/2)(n_o*/n_o)^2 gamma_j.  The body's own mass cancels."""
    gamma1 = p.J2 / p.C_norm
    gamma2 = 2.0 * p.C22 / p.C_norm
    g_kmyr = p.G_const * _KM3_PER_KG_YR2
    n_o_star = math.sqrt(g_kmyr * p.M / p.a**3)
    ratio2 = (n_o_star / p.n_o) ** 2
    return DerivedParams(gamma1, gamma2, n_o_star,
                         -1.5 * ratio2 * gamma1, -1.5 * ratio2 * gamma2)


# -- lattice series -------------------------------------------------------
#
# Construction algebra: complex Fourier series on the 5-angle lattice
# (s1, s3, l4, l5, l6) whose coefficients are monomials cK^p sK^q in the
# obliquity.  Keys pack (j_s1, j_s3, j_l4, j_l5, j_l6, p, q) in an int64.

_SK_BITS, _CK_BITS = 2, 4
_L6_OFF, _L5_OFF, _L4_OFF, _S_OFF = 32, 128, 128, 32
_SH_CK = _SK_BITS
_SH_L6 = _SH_CK + _CK_BITS
_SH_L5 = _SH_L6 + 6
_SH_L4 = _SH_L5 + 8
_SH_S3 = _SH_L4 + 8
_SH_S1 = _SH_S3 + 6


def _lpack(s1, s3, l4, l5, l6, ck, sk):
    return (((s1 + _S_OFF).astype(np.int64) << _SH_S1)
            | ((s3 + _S_OFF).astype(np.int64) << _SH_S3)
            | ((l4 + _L4_OFF).astype(np.int64) << _SH_L4)
            | ((l5 + _L5_OFF).astype(np.int64) << _SH_L5)
            | ((l6 + _L6_OFF).astype(np.int64) << _SH_L6)
            | (ck.astype(np.int64) << _SH_CK)
            | sk.astype(np.int64))


def _lunpack(keys):
    s1 = (keys >> _SH_S1) - _S_OFF
    s3 = ((keys >> _SH_S3) & 0x3F) - _S_OFF
    l4 = ((keys >> _SH_L4) & 0xFF) - _L4_OFF
    l5 = ((keys >> _SH_L5) & 0xFF) - _L5_OFF
    l6 = ((keys >> _SH_L6) & 0x3F) - _L6_OFF
    ck = (keys >> _SH_CK) & 0xF
    sk = keys & 0x3
    return s1, s3, l4, l5, l6, ck, sk


def _lreduce(keys, coeffs):
    if keys.size == 0:
        return keys, coeffs
    uk, inv = np.unique(keys, return_inverse=True)
    re = np.bincount(inv, weights=coeffs.real, minlength=uk.size)
    im = np.bincount(inv, weights=coeffs.imag, minlength=uk.size)
    c = re + 1j * im
    live = c != 0.0
    return uk[live], c[live]


class LatticeSeries:
    """Internal construction series; see module comment."""

    __slots__ = ("keys", "coeffs")

    def __init__(self, keys=None, coeffs=None):
        self.keys = keys if keys is not None else np.empty(0, np.int64)
        self.coeffs = coeffs if coeffs is not None else np.empty(0, np.complex128)

    @classmethod
    def from_items(cls, items):
        """items: iterable of ((s1,s3,l4,l5,l6,ck,sk), complex)."""
        if not items:
            return cls()
        arr = np.array([it[0] for it in items], dtype=np.int64).T
        coeffs = np.array([it[1] for it in items], dtype=np.complex128)
        keys, c = _lreduce(_lpack(*arr), coeffs)
        return cls(keys, c)

    def __len__(self):
        return int(self.keys.size)

    def __add__(self, other):
        keys, c = _lreduce(np.concatenate([self.keys, other.keys]),
                           np.concatenate([self.coeffs, other.coeffs]))
        return LatticeSeries(keys, c)

    def scale(self, factor):
        return LatticeSeries(self.keys, self.coeffs * factor)

    def shift(self, wave, factor=1.0 + 0.0j):
        """Multiply by factor * exp(i * wave . angles)."""
        if self.keys.size == 0:
            return LatticeSeries()
        s1, s3, l4, l5, l6, ck, sk = _lunpack(self.keys)
        keys = _lpack(s1 + wave[0], s3 + wave[1], l4 + wave[2],
                      l5 + wave[3], l6 + wave[4], ck, sk)
        order = np.argsort(keys, kind="stable")
        return LatticeSeries(keys[order], (self.coeffs * factor)[order])

    def mul_kpoly(self, dck, dsk, factor=1.0 + 0.0j):
        """Multiply by factor * cK^dck * sK^dsk, then reduce sK powers."""
        if self.keys.size == 0:
            return LatticeSeries()
        s1, s3, l4, l5, l6, ck, sk = _lunpack(self.keys)
        return LatticeSeries._build(s1, s3, l4, l5, l6, ck + dck, sk + dsk,
                                    self.coeffs * factor)

    @staticmethod
    def _build(s1, s3, l4, l5, l6, ck, sk, coeffs):
        # fold sK^2 -> 1 - cK^2 until every term has sk <= 1
        while (sk >= 2).any():
            hot = sk >= 2
            s1h, s3h, l4h, l5h, l6h = (a[hot] for a in (s1, s3, l4, l5, l6))
            ckh, skh, ch = ck[hot], sk[hot], coeffs[hot]
            s1 = np.concatenate([s1[~hot], s1h, s1h])
            s3 = np.concatenate([s3[~hot], s3h, s3h])
            l4 = np.concatenate([l4[~hot], l4h, l4h])
            l5 = np.concatenate([l5[~hot], l5h, l5h])
            l6 = np.concatenate([l6[~hot], l6h, l6h])
            ck = np.concatenate([ck[~hot], ckh, ckh + 2])
            sk = np.concatenate([sk[~hot], skh - 2, skh - 2])
            coeffs = np.concatenate([coeffs[~hot], ch, -ch])
        keys, c = _lreduce(_lpack(s1, s3, l4, l5, l6, ck, sk), coeffs)
        return LatticeSeries(keys, c)

    def mul(self, other):
        if self.keys.size == 0 or other.keys.size == 0:
            return LatticeSeries()
        a = _lunpack(self.keys)
        b = _lunpack(other.keys)
        na, nb = self.keys.size, other.keys.size
        ia = np.repeat(np.arange(na), nb)
        ib = np.tile(np.arange(nb), na)
        comp = [a[j][ia] + b[j][ib] for j in range(7)]
        coeffs = self.coeffs[ia] * other.coeffs[ib]
        return LatticeSeries._build(*comp, coeffs)

    def evaluate(self, angles, K):
        """Numeric value at angles = (s1, s3, l4, l5, l6) and obliquity K.
        The series must represent a real function."""
        if self.keys.size == 0:
            return 0.0
        s1, s3, l4, l5, l6, ck, sk = _lunpack(self.keys)
        phase = (s1 * angles[0] + s3 * angles[1] + l4 * angles[2]
                 + l5 * angles[3] + l6 * angles[4])
        val = np.sum(self.coeffs * np.exp(1j * phase)
                     * math.cos(K) ** ck * math.sin(K) ** sk)
        if abs(val.imag) > 1e-10 * (1.0 + abs(val.real)):
            raise DomainError("series does not represent a real function")
        return float(val.real)

    def total_mass(self):
        return float(np.abs(self.coeffs).sum())


def _rot3(vec, wave):
    """Rotation about the third axis by the lattice angle wave . theta:
    x' = cos(t) x + sin(t) y, y' = -sin(t) x + cos(t) y."""
    x, y, z = vec
    w = tuple(wave)
    nw = tuple(-c for c in wave)
    xp = (x.shift(w, 0.5) + x.shift(nw, 0.5)
          + y.shift(w, -0.5j) + y.shift(nw, 0.5j))
    yp = (x.shift(w, 0.5j) + x.shift(nw, -0.5j)
          + y.shift(w, 0.5) + y.shift(nw, 0.5))
    return (xp, yp, z)


def _rot1_K(vec):
    """Rotation about the first axis by the symbolic obliquity K."""
    x, y, z = vec
    yp = y.mul_kpoly(1, 0) + z.mul_kpoly(0, 1)
    zp = y.mul_kpoly(0, 1, -1.0) + z.mul_kpoly(1, 0)
    return (x, yp, zp)


def _rot1_num(vec, angle):
    x, y, z = vec
    c, s = math.cos(angle), math.sin(angle)
    yp = y.scale(c) + z.scale(s)
    zp = y.scale(-s) + z.scale(c)
    return (x, yp, zp)


def _expansion_to_lattice(exp, e, wave):
    """Place an eccentricity expansion on the lattice with its angle
    mapped to wave . theta, folding in the numeric eccentricity."""
    acc = {}
    for (p, k, kind), c in exp.series.items():
        val = c * e**p
        if val == 0.0:
            continue
        plus = tuple(k * w for w in wave) + (0, 0)
        minus = tuple(-k * w for w in wave) + (0, 0)
        if kind == "cos":
            acc[plus] = acc.get(plus, 0j) + 0.5 * val
            acc[minus] = acc.get(minus, 0j) + 0.5 * val
        else:
            acc[plus] = acc.get(plus, 0j) - 0.5j * val
            acc[minus] = acc.get(minus, 0j) + 0.5j * val
    return LatticeSeries.from_items(list(acc.items()))


_W_LO = (0, 0, 1, 1, 0)        # l_o = l4 + l5
_W_MINUS_GO = (0, 0, 0, 1, -1)  # -g_o, with g_o = l6 - l5
_W_L6 = (0, 0, 0, 0, 1)         # -h_o
_W_HS = (0, -1, 0, 0, -1)       # h_s = -(s3 + l6)
_W_SPIN = (1, 1, 1, 0, 1)       # l_s + g_s = s1 + s3 + l4 + l6


def _direction_vector(e: float, i: float, ecc_degree: int):
    _, cosv, sinv = kepler_expansions(ecc_degree)
    vec = (_expansion_to_lattice(cosv, e, _W_LO),
           _expansion_to_lattice(sinv, e, _W_LO),
           LatticeSeries())
    vec = _rot3(vec, _W_MINUS_GO)
    vec = _rot1_num(vec, -i)
    vec = _rot3(vec, _W_L6)
    vec = _rot3(vec, _W_HS)
    vec = _rot1_K(vec)
    vec = _rot3(vec, _W_SPIN)
    return vec


def body_direction_series(p: BodyParams, trunc: TruncationPolicy):
    """Body-frame components (x3, y3, z3) of the unit vector to the
    perturber, with zero wobble, as lattice series in the resonant
    angles, the fast/slow orbital angles and the symbolic obliquity.

    The frame chain applies, right to left, the pericenter, inclination
    and node rotations of the orbit followed by the node, obliquity and
    spin rotations of the body.
    """
    return _direction_vector(p.e, p.i, trunc.max_ecc_degree)


@dataclass
class PotentialDiagnostics:
    """Coefficient mass removed or checked by the averaging projection."""

    fast_dropped_mass: float = 0.0
    pericenter_dropped_mass: float = 0.0
    node_residual_mass: float = 0.0
    sin_residual: float = 0.0
    imag_residual: float = 0.0


class KHarmonics:
    """Real trigonometric polynomial in (s1, s3) whose coefficients are
    polynomials in (cos K, sin K) with sin-degree at most one.

    ``terms`` maps the canonical wave (j1, j3) to a dict
    {(ck_pow, sk_pow): coeff}; every harmonic is a cosine.
    """

    def __init__(self, terms: dict):
        self.terms = {w: dict(kp) for w, kp in terms.items() if kp}

    def harmonics(self):
        return sorted(self.terms)

    def scale(self, factor: float) -> "KHarmonics":
        return KHarmonics({w: {pq: factor * v for pq, v in kp.items()}
                           for w, kp in self.terms.items()})

    def __add__(self, other: "KHarmonics") -> "KHarmonics":
        out = {w: dict(kp) for w, kp in self.terms.items()}
        for w, kp in other.terms.items():
            tgt = out.setdefault(w, {})
            for pq, v in kp.items():
                tgt[pq] = tgt.get(pq, 0.0) + v
        return KHarmonics(out)

    def coeff_value(self, wave, cK: float, sK: float) -> float:
        kp = self.terms.get(tuple(wave), {})
        return sum(v * cK**p * sK**q for (p, q), v in kp.items())

    def coeff_max_mass(self, wave) -> float:
        return sum(abs(v) for v in self.terms.get(tuple(wave), {}).values())

    def evaluate(self, s1: float, s3: float, cK: float, sK: float) -> float:
        total = 0.0
        for (j1, j3), kp in self.terms.items():
            coeff = sum(v * cK**p * sK**q for (p, q), v in kp.items())
            total += coeff * math.cos(j1 * s1 + j3 * s3)
        return total

    def d_dck(self) -> "KHarmonics":
        out = {}
        for w, kp in self.terms.items():
            d = {}
            for (p, q), v in kp.items():
                if p:
                    d[(p - 1, q)] = d.get((p - 1, q), 0.0) + p * v
            if d:
                out[w] = d
        return KHarmonics(out)

    def d_dsk(self) -> "KHarmonics":
        out = {}
        for w, kp in self.terms.items():
            d = {}
            for (p, q), v in kp.items():
                if q:
                    d[(p, 0)] = d.get((p, 0), 0.0) + v
            if d:
                out[w] = d
        return KHarmonics(out)

    def max_abs(self) -> float:
        return max((abs(v) for kp in self.terms.values() for v in kp.values()),
                   default=0.0)

    def prune(self, tol: float) -> "KHarmonics":
        return KHarmonics({
            w: {pq: v for pq, v in kp.items() if abs(v) > tol}
            for w, kp in self.terms.items()})

    def to_text(self) -> str:
        lines = []
        for (j1, j3) in self.harmonics():
            for (p, q) in sorted(self.terms[(j1, j3)]):
                v = self.terms[(j1, j3)][(p, q)]
                lines.append(f"{v!r} {p} {q} cos {j1} {j3}")
        return "\n".join(lines) + ("\n" if lines else "")


def _project_resonant(series: LatticeSeries, diagnostics: PotentialDiagnostics,
                      sin_tol: float = 1e-12):
    """Keep only terms free of the fast angle and the pericenter, fold to
    real cosine harmonics in (s1, s3), and account for everything else."""
    if series.keys.size == 0:
        return KHarmonics({})
    s1, s3, l4, l5, l6, ck, sk = _lunpack(series.keys)
    c = series.coeffs
    fast = l4 != 0
    peri = (~fast) & (l5 != 0)
    keep = (~fast) & (~peri)
    diagnostics.fast_dropped_mass += float(np.abs(c[fast]).sum())
    diagnostics.pericenter_dropped_mass += float(np.abs(c[peri]).sum())
    node = keep & (l6 != 0)
    diagnostics.node_residual_mass += float(np.abs(c[node]).sum())
    keep &= ~node

    terms: dict = {}
    scale = float(np.abs(c[keep]).max()) if keep.any() else 0.0
    for idx in np.flatnonzero(keep):
        w = (int(s1[idx]), int(s3[idx]))
        pq = (int(ck[idx]), int(sk[idx]))
        flip = w[0] < 0 or (w[0] == 0 and w[1] < 0)
        wc = (-w[0], -w[1]) if flip else w
        val = c[idx]
        # the conjugate row supplies the other half of each cosine
        cos_part = val.real
        sin_part = (val.imag if flip else -val.imag)
        tgt = terms.setdefault(wc, {})
        tgt[pq] = tgt.get(pq, 0.0) + cos_part
        if wc != (0, 0):
            diagnostics.sin_residual = max(diagnostics.sin_residual,
                                           abs(sin_part))
        else:
            diagnostics.imag_residual = max(diagnostics.imag_residual,
                                            abs(val.imag))
    if scale > 0.0 and diagnostics.sin_residual > sin_tol * scale:
        raise DomainError(
            f"averaged potential acquired sine harmonics "
            f"({diagnostics.sin_residual:.2e} vs scale {scale:.2e})")
    kh = KHarmonics(terms)
    return kh.prune(1e-300)


@dataclass
class AveragedPotential:
    """Averaged potential and its scan-reusable shape parts.

    ``total`` is delta1 * shape_plus + delta2 * shape_minus in rad/year;
    the shapes depend only on (e, i, n_o, truncations).
    """

    total: KHarmonics
    shape_plus: KHarmonics
    shape_minus: KHarmonics
    diagnostics: PotentialDiagnostics


@lru_cache(maxsize=64)
def _potential_shapes(e: float, i: float, n_o: float, ecc_degree: int):
    """n_o <(a/r)^3 (x3^2 +/- y3^2)> projected on the resonant lattice."""
    x3, y3, _ = _direction_vector(e, i, ecc_degree)
    ar3, _, _ = kepler_expansions(ecc_degree)
    ar3_lat = _expansion_to_lattice(ar3, e, _W_LO)
    xx = x3.mul(x3)
    yy = y3.mul(y3)
    diag = PotentialDiagnostics()
    plus = _project_resonant(ar3_lat.mul(xx + yy).scale(n_o), diag)
    minus = _project_resonant(ar3_lat.mul(xx + yy.scale(-1.0)).scale(n_o), diag)
    return plus, minus, diag


def averaged_potential(p: BodyParams, trunc: TruncationPolicy) -> AveragedPotential:
    """Average of the tidal potential over the fast orbital angle, as a
    cosine polynomial in the resonant angles with (cos K, sin K)
    polynomial coefficients, in rad/year."""
    d = derive_params(p)
    plus, minus, diag = _potential_shapes(p.e, p.i, p.n_o, trunc.max_ecc_degree)
    total = plus.scale(d.delta1) + minus.scale(d.delta2)
    return AveragedPotential(total=total.prune(1e-300), shape_plus=plus,
                             shape_minus=minus, diagnostics=diag)


@dataclass
class HamiltonianModel:
    """Closed-form averaged Hamiltonian before any local expansion."""

    params: BodyParams
    derived: DerivedParams
    potential: AveragedPotential
    trunc: TruncationPolicy

    @property
    def n_o(self) -> float:
        return self.params.n_o

    @property
    def Omega_dot(self) -> float:
        return self.params.Omega_dot

    def obliquity_cos_sin(self, Sigma1: float, Sigma3: float):
        cK = 1.0 - Sigma3 / Sigma1
        if not -1.0 <= cK <= 1.0:
            raise DomainError(f"cos K = {cK} outside [-1, 1]")
        return cK, math.sqrt(1.0 - cK * cK)

    def evaluate(self, Sigma1: float, Sigma3: float,
                 sigma1: float = 0.0, sigma3: float = 0.0) -> float:
        cK, sK = self.obliquity_cos_sin(Sigma1, Sigma3)
        n_o = self.n_o
        kinetic = 0.5 * n_o * Sigma1**2 - n_o * Sigma1 + self.Omega_dot * Sigma3
        return kinetic + self.potential.total.evaluate(sigma1, sigma3, cK, sK)

    def grad_actions(self, Sigma1: float, Sigma3: float):
        """(dH/dS1, dH/dS3) at sigma = 0, via the obliquity chain rule."""
        cK, sK = self.obliquity_cos_sin(Sigma1, Sigma3)
        dck = self.potential.total.d_dck()
        dsk = self.potential.total.d_dsk()
        df_dc = sum(dck.coeff_value(w, cK, sK) for w in dck.harmonics())
        df_ds = sum(dsk.coeff_value(w, cK, sK) for w in dsk.harmonics())
        dc_d1 = Sigma3 / Sigma1**2
        dc_d3 = -1.0 / Sigma1
        if df_ds != 0.0:
            if sK == 0.0:
                raise DomainError("gradient undefined at zero obliquity")
            ds_d1 = -(cK / sK) * dc_d1
            ds_d3 = -(cK / sK) * dc_d3
        else:
            ds_d1 = ds_d3 = 0.0
        n_o = self.n_o
        g1 = n_o * Sigma1 - n_o + df_dc * dc_d1 + df_ds * ds_d1
        g3 = self.Omega_dot + df_dc * dc_d3 + df_ds * ds_d3
        return g1, g3


def assemble_hamiltonian(p: BodyParams, trunc: TruncationPolicy) -> HamiltonianModel:
    """Build the averaged Hamiltonian model for one parameter set."""
    return HamiltonianModel(params=p, derived=derive_params(p),
                            potential=averaged_potential(p, trunc),
                            trunc=trunc)
