"""Sparse algebra for Poisson series and 4-variable polynomials.

A Poisson series here is a finite sum of terms

    c * sqrt(U1)^m1 * sqrt(U3)^m3 * {cos|sin}(k1*u1 + k3*u3)

with real coefficients, half-integer action powers tracked through the
integer exponents (m1, m3) and an integer wave vector (k1, k3).  Terms are
stored in canonical form: the first nonzero wave component is positive
(the sign is folded into the coefficient for sine terms), zero
coefficients are never stored, and a sine term with zero wave is
identically zero and therefore dropped.

The module also provides ``Poly4``, a plain polynomial in the four
variables (S1, S3, s1, s3) used while expanding a Hamiltonian around an
equilibrium before switching to action-angle variables.

Storage is a pair of parallel numpy arrays (packed int64 keys, float64
coefficients) kept sorted by key, which makes every operation
deterministic regardless of construction order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, SingularDerivativeError

COS = 0
SIN = 1

_KIND_NAMES = {COS: "cos", SIN: "sin"}
_KIND_CODES = {"cos": COS, "sin": SIN, COS: COS, SIN: SIN}

# Packed key layout (low to high bits):
#   k3+512 : 10 bits | k1+512 : 10 bits | kind : 1 bit | m3+2 : 7 bits | m1+2 : 7 bits
# The +2 offset on the exponents leaves room for the transient negative
# powers that appear inside Poisson-bracket assembly.
_K_OFF = 512
_M_OFF = 2
_SH_K1 = 10
_SH_KIND = 20
_SH_M3 = 21
_SH_M1 = 28

_MAX_M = (1 << 7) - 1 - _M_OFF
_MAX_K = _K_OFF - 1


def _pack(m1, m3, kind, k1, k3):
    return (
        ((m1 + _M_OFF).astype(np.int64) << _SH_M1)
        | ((m3 + _M_OFF).astype(np.int64) << _SH_M3)
        | (kind.astype(np.int64) << _SH_KIND)
        | ((k1 + _K_OFF).astype(np.int64) << _SH_K1)
        | (k3 + _K_OFF).astype(np.int64)
    )


def _unpack(keys):
    m1 = (keys >> _SH_M1) - _M_OFF
    m3 = ((keys >> _SH_M3) & 0x7F) - _M_OFF
    kind = (keys >> _SH_KIND) & 0x1
    k1 = ((keys >> _SH_K1) & 0x3FF) - _K_OFF
    k3 = (keys & 0x3FF) - _K_OFF
    return m1, m3, kind, k1, k3


def _reduce(keys, coeffs):
    """Sort, merge duplicate keys, and drop exact zeros."""
    if keys.size == 0:
        return keys.astype(np.int64), coeffs.astype(np.float64)
    uk, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=coeffs, minlength=uk.size)
    live = sums != 0.0
    return uk[live], sums[live]


def _canonicalize(m1, m3, kind, k1, k3, coeffs):
    """Fold wave signs and drop identically-zero sine terms."""
    flip = (k1 < 0) | ((k1 == 0) & (k3 < 0))
    k1 = np.where(flip, -k1, k1)
    k3 = np.where(flip, -k3, k3)
    coeffs = np.where(flip & (kind == SIN), -coeffs, coeffs)
    zero_sin = (kind == SIN) & (k1 == 0) & (k3 == 0)
    keep = ~zero_sin
    return (m1[keep], m3[keep], kind[keep], k1[keep], k3[keep], coeffs[keep])


@dataclass(frozen=True)
class TruncationPolicy:
    """Degree caps used consistently across the expansion pipeline.

    ``max_sqrtU_degree`` caps m1+m3 in Poisson series, ``max_poly_degree``
    the total degree of 4-variable polynomials, and ``max_ecc_degree`` the
    eccentricity order of the orbital expansions.
    """

    max_sqrtU_degree: int = 16
    max_poly_degree: int = 16
    max_ecc_degree: int = 8

    def __post_init__(self):
        for name in ("max_sqrtU_degree", "max_poly_degree", "max_ecc_degree"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise DomainError(f"{name} must be an integer >= 1, got {v!r}")
        if self.max_sqrtU_degree > _MAX_M:
            raise DomainError(f"max_sqrtU_degree above storage limit {_MAX_M}")


@dataclass(frozen=True)
class WeightVector:
    """Positive polydisk weights (R1, R3) for the majorant norm."""

    R1: float
    R3: float

    def __post_init__(self):
        if not (self.R1 > 0.0 and self.R3 > 0.0):
            raise DomainError(f"weights must be positive, got {self.R1}, {self.R3}")


class PoissonTerm(NamedTuple):
    """A single canonical term of a Poisson series."""

    coeff: float
    m1: int
    m3: int
    kind: str
    k1: int
    k3: int


class PoissonSeries:
    """Immutable sparse Poisson series.

    Build instances with :meth:`from_terms`, :meth:`zero` or the module
    level operations; the raw constructor is internal.
    """

    __slots__ = ("_keys", "_coeffs", "trunc", "dropped_mass")

    def __init__(self, keys, coeffs, trunc, dropped_mass=0.0, _validate=True):
        keys = np.asarray(keys, dtype=np.int64)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if _validate and keys.size:
            m1, m3, _, _, _ = _unpack(keys)
            if (m1 < 0).any() or (m3 < 0).any():
                bad = np.flatnonzero((m1 < 0) | (m3 < 0))[0]
                raise SingularDerivativeError(
                    f"negative sqrt-action exponent (m1={m1[bad]}, m3={m3[bad]}) "
                    f"with coefficient {coeffs[bad]!r}"
                )
            if not np.isfinite(coeffs).all():
                raise DomainError("non-finite coefficient in series")
        keys.setflags(write=False)
        coeffs.setflags(write=False)
        self._keys = keys
        self._coeffs = coeffs
        self.trunc = trunc
        self.dropped_mass = float(dropped_mass)

    # -- construction -------------------------------------------------

    @classmethod
    def zero(cls, trunc: TruncationPolicy) -> "PoissonSeries":
        return cls(np.empty(0, np.int64), np.empty(0, np.float64), trunc)

    @classmethod
    def from_terms(cls, terms: Iterable[tuple], trunc: TruncationPolicy) -> "PoissonSeries":
        """Build a series from (coeff, (m1, m3), kind, (k1, k3)) tuples.

        ``kind`` is "cos" or "sin".  Terms are canonicalized and merged;
        over-degree terms raise rather than being silently dropped, since
        explicit construction of an out-of-policy term is a caller bug.
        """
        rows = list(terms)
        if not rows:
            return cls.zero(trunc)
        coeffs = np.array([r[0] for r in rows], dtype=np.float64)
        m1 = np.array([r[1][0] for r in rows], dtype=np.int64)
        m3 = np.array([r[1][1] for r in rows], dtype=np.int64)
        kind = np.array([_KIND_CODES[r[2]] for r in rows], dtype=np.int64)
        k1 = np.array([r[3][0] for r in rows], dtype=np.int64)
        k3 = np.array([r[3][1] for r in rows], dtype=np.int64)
        if (m1 < 0).any() or (m3 < 0).any():
            raise SingularDerivativeError("negative sqrt-action exponent in term")
        if ((kind == SIN) & (k1 == 0) & (k3 == 0) & (coeffs != 0.0)).any():
            raise DomainError("sin term with zero wave vector is forbidden")
        if (m1 + m3 > trunc.max_sqrtU_degree).any():
            raise DomainError("term degree exceeds truncation policy")
        if (np.abs(k1) > _MAX_K).any() or (np.abs(k3) > _MAX_K).any():
            raise DomainError("wave component exceeds storage limit")
        m1, m3, kind, k1, k3, coeffs = _canonicalize(m1, m3, kind, k1, k3, coeffs)
        keys, vals = _reduce(_pack(m1, m3, kind, k1, k3), coeffs)
        return cls(keys, vals, trunc)

    @classmethod
    def constant(cls, value: float, trunc: TruncationPolicy) -> "PoissonSeries":
        if value == 0.0:
            return cls.zero(trunc)
        return cls.from_terms([(value, (0, 0), "cos", (0, 0))], trunc)

    @classmethod
    def _from_raw(cls, m1, m3, kind, k1, k3, coeffs, trunc, dropped_mass=0.0,
                  _validate=True):
        m1, m3, kind, k1, k3, coeffs = _canonicalize(
            np.asarray(m1, np.int64), np.asarray(m3, np.int64),
            np.asarray(kind, np.int64), np.asarray(k1, np.int64),
            np.asarray(k3, np.int64), np.asarray(coeffs, np.float64))
        keys, vals = _reduce(_pack(m1, m3, kind, k1, k3), coeffs)
        return cls(keys, vals, trunc, dropped_mass, _validate=_validate)

    # -- inspection ---------------------------------------------------

    def __len__(self) -> int:
        return int(self._keys.size)

    def __iter__(self) -> Iterator[PoissonTerm]:
        m1, m3, kind, k1, k3 = _unpack(self._keys)
        for i in range(self._keys.size):
            yield PoissonTerm(float(self._coeffs[i]), int(m1[i]), int(m3[i]),
                              _KIND_NAMES[int(kind[i])], int(k1[i]), int(k3[i]))

    def arrays(self):
        """Raw (m1, m3, kind, k1, k3, coeff) column arrays (read-only views)."""
        m1, m3, kind, k1, k3 = _unpack(self._keys)
        return m1, m3, kind, k1, k3, self._coeffs

    @property
    def is_zero(self) -> bool:
        return self._keys.size == 0

    def degrees(self) -> np.ndarray:
        m1, m3, _, _, _ = _unpack(self._keys)
        return m1 + m3

    def max_degree(self) -> int:
        return int(self.degrees().max()) if len(self) else 0

    def max_abs_coeff(self) -> float:
        return float(np.abs(self._coeffs).max()) if len(self) else 0.0

    def coefficient(self, m: tuple, kind: str, k: tuple) -> float:
        """Coefficient of a single canonical term (0.0 if absent)."""
        k1, k3 = int(k[0]), int(k[1])
        sign = 1.0
        if k1 < 0 or (k1 == 0 and k3 < 0):
            k1, k3 = -k1, -k3
            if _KIND_CODES[kind] == SIN:
                sign = -1.0
        key = _pack(np.array([m[0]]), np.array([m[1]]),
                    np.array([_KIND_CODES[kind]]), np.array([k1]), np.array([k3]))
        idx = np.searchsorted(self._keys, key[0])
        if idx < self._keys.size and self._keys[idx] == key[0]:
            return sign * float(self._coeffs[idx])
        return 0.0

    def __repr__(self):
        return (f"PoissonSeries({len(self)} terms, max degree "
                f"{self.max_degree()})")

    # -- linear structure ----------------------------------------------

    def __add__(self, other: "PoissonSeries") -> "PoissonSeries":
        if not isinstance(other, PoissonSeries):
            return NotImplemented
        keys = np.concatenate([self._keys, other._keys])
        coeffs = np.concatenate([self._coeffs, other._coeffs])
        keys, vals = _reduce(keys, coeffs)
        return PoissonSeries(keys, vals, self.trunc, _validate=False)

    def __sub__(self, other: "PoissonSeries") -> "PoissonSeries":
        return self + (-other)

    def __neg__(self) -> "PoissonSeries":
        return PoissonSeries(self._keys, -self._coeffs, self.trunc, _validate=False)

    def scale(self, factor: float) -> "PoissonSeries":
        if factor == 0.0:
            return PoissonSeries.zero(self.trunc)
        return PoissonSeries(self._keys, factor * self._coeffs, self.trunc,
                             _validate=False)

    # -- selections -----------------------------------------------------

    def homogeneous_part(self, s: int) -> "PoissonSeries":
        """Terms of sqrt-action degree m1 + m3 == s exactly."""
        if s < 0:
            raise DomainError("degree must be nonnegative")
        mask = self.degrees() == s
        return PoissonSeries(self._keys[mask], self._coeffs[mask], self.trunc,
                             _validate=False)

    def up_to_degree(self, s: int) -> "PoissonSeries":
        mask = self.degrees() <= s
        return PoissonSeries(self._keys[mask], self._coeffs[mask], self.trunc,
                             _validate=False)

    def degree_range(self, lo: int, hi: int) -> "PoissonSeries":
        d = self.degrees()
        mask = (d >= lo) & (d <= hi)
        return PoissonSeries(self._keys[mask], self._coeffs[mask], self.trunc,
                             _validate=False)

    def angle_dependent_part(self) -> "PoissonSeries":
        _, _, _, k1, k3 = _unpack(self._keys)
        mask = (k1 != 0) | (k3 != 0)
        return PoissonSeries(self._keys[mask], self._coeffs[mask], self.trunc,
                             _validate=False)

    def action_only_part(self) -> "PoissonSeries":
        _, _, _, k1, k3 = _unpack(self._keys)
        mask = (k1 == 0) & (k3 == 0)
        return PoissonSeries(self._keys[mask], self._coeffs[mask], self.trunc,
                             _validate=False)

    # -- calculus -------------------------------------------------------

    def derivative_angle(self, j: int) -> "PoissonSeries":
        """Partial derivative with respect to u_j (j in {1, 3})."""
        m1, m3, kind, k1, k3, c = self.arrays()
        kj = k1 if j == 1 else k3
        live = kj != 0
        m1, m3, kind, k1, k3, c, kj = (a[live] for a in (m1, m3, kind, k1, k3, c, kj))
        # d cos(k.u)/du_j = -k_j sin(k.u);  d sin(k.u)/du_j = k_j cos(k.u)
        new_c = np.where(kind == COS, -kj * c, kj * c)
        return PoissonSeries._from_raw(m1, m3, 1 - kind, k1, k3, new_c, self.trunc)

    def derivative_action(self, j: int) -> "PoissonSeries":
        """Partial derivative with respect to U_j.

        Raises ``SingularDerivativeError`` if a term acquires a genuine
        negative half-power (m_j == 1 before differentiation).
        """
        m1, m3, kind, k1, k3, c = self.arrays()
        mj = m1 if j == 1 else m3
        live = mj != 0
        m1, m3, kind, k1, k3, c, mj = (a[live] for a in (m1, m3, kind, k1, k3, c, mj))
        new_c = c * (mj / 2.0)
        if j == 1:
            m1 = m1 - 2
        else:
            m3 = m3 - 2
        return PoissonSeries._from_raw(m1, m3, kind, k1, k3, new_c, self.trunc)

    # -- evaluation -----------------------------------------------------

    def evaluate(self, U: Sequence[float], u: Sequence[float]) -> float:
        """Numeric value at actions U = (U1, U3), angles u = (u1, u3)."""
        U1, U3 = float(U[0]), float(U[1])
        if U1 < 0.0 or U3 < 0.0:
            raise DomainError(f"actions must be nonnegative, got ({U1}, {U3})")
        if self.is_zero:
            return 0.0
        m1, m3, kind, k1, k3, c = self.arrays()
        pw1 = _half_pow(U1, m1)
        pw3 = _half_pow(U3, m3)
        phase = k1 * float(u[0]) + k3 * float(u[1])
        trig = np.where(kind == COS, np.cos(phase), np.sin(phase))
        return float(np.sum(c * pw1 * pw3 * trig))

    def gradient(self, U: Sequence[float], u: Sequence[float]):
        """(dH/dU1, dH/dU3, dH/du1, dH/du3) at a point with U_j > 0."""
        U1, U3 = float(U[0]), float(U[1])
        if U1 <= 0.0 or U3 <= 0.0:
            raise DomainError("gradient evaluation requires positive actions")
        m1, m3, kind, k1, k3, c = self.arrays()
        pw1 = np.exp(0.5 * m1 * np.log(U1))
        pw3 = np.exp(0.5 * m3 * np.log(U3))
        phase = k1 * float(u[0]) + k3 * float(u[1])
        cosp, sinp = np.cos(phase), np.sin(phase)
        trig = np.where(kind == COS, cosp, sinp)
        dtrig = np.where(kind == COS, -sinp, cosp)
        base = c * pw1 * pw3
        dU1 = float(np.sum(base * trig * (0.5 * m1) / U1))
        dU3 = float(np.sum(base * trig * (0.5 * m3) / U3))
        du1 = float(np.sum(base * dtrig * k1))
        du3 = float(np.sum(base * dtrig * k3))
        return dU1, dU3, du1, du3

    # -- serialization ----------------------------------------------------

    def _sorted_rows(self):
        m1, m3, kind, k1, k3, c = self.arrays()
        order = np.lexsort((kind, k3, k1, m1, m1 + m3))
        return [(float(c[i]), int(m1[i]), int(m3[i]), _KIND_NAMES[int(kind[i])],
                 int(k1[i]), int(k3[i])) for i in order]

    def to_text(self) -> str:
        """Line-oriented dump: ``coeff m1 m3 kind k1 k3`` per term, sorted
        by (total degree, m1, k1, k3, kind).  Round-trips bit-exactly."""
        lines = [f"{coeff!r} {m1} {m3} {kind} {k1} {k3}"
                 for coeff, m1, m3, kind, k1, k3 in self._sorted_rows()]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, trunc: TruncationPolicy) -> "PoissonSeries":
        terms = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            coeff, m1, m3, kind, k1, k3 = line.split()
            terms.append((float(coeff), (int(m1), int(m3)), kind,
                          (int(k1), int(k3))))
        return cls.from_terms(terms, trunc)

    def to_json_obj(self) -> list:
        return [[coeff, m1, m3, kind, k1, k3]
                for coeff, m1, m3, kind, k1, k3 in self._sorted_rows()]

    @classmethod
    def from_json_obj(cls, obj: list, trunc: TruncationPolicy) -> "PoissonSeries":
        return cls.from_terms(
            [(row[0], (row[1], row[2]), row[3], (row[4], row[5])) for row in obj],
            trunc)


# -- bulk term emission helpers (shared by multiply and bracket) ---------


def _emit_products(am1, am3, akind, ak1, ak3, ac,
                   bm1, bm3, bkind, bk1, bk3, bc):
    """Linearize elementwise products of two aligned term-pair blocks into
    sums of single cos/sin terms.  Returns unpacked column arrays of
    length 2 * len(pairs)."""
    m1 = am1 + bm1
    m3 = am3 + bm3
    ka1 = ak1
    ka3 = ak3
    kb1 = bk1
    kb3 = bk3
    cc = ac * bc
    kinda = akind
    kindb = bkind
    # product-to-sum: result kind is XOR; the (X+Y) branch flips sign for
    # sin*sin, the (X-Y) branch for cos*sin.
    kind_new = kinda ^ kindb
    sign_plus = np.where((kinda == SIN) & (kindb == SIN), -0.5, 0.5)
    sign_minus = np.where((kinda == COS) & (kindb == SIN), -0.5, 0.5)
    m1 = np.concatenate([m1, m1])
    m3 = np.concatenate([m3, m3])
    kind = np.concatenate([kind_new, kind_new])
    k1 = np.concatenate([ka1 + kb1, ka1 - kb1])
    k3 = np.concatenate([ka3 + kb3, ka3 - kb3])
    coeff = np.concatenate([cc * sign_plus, cc * sign_minus])
    return m1, m3, kind, k1, k3, coeff


_CHUNK = 1 << 21


def _product_emissions(a: PoissonSeries, b: PoissonSeries, max_degree: int):
    """Yield emission column-blocks for a*b with degree cap applied,
    accumulating the absolute coefficient mass dropped by truncation."""
    am1, am3, akind, ak1, ak3, ac = a.arrays()
    bm1, bm3, bkind, bk1, bk3, bc = b.arrays()
    dropped = 0.0
    if ac.size == 0 or bc.size == 0:
        return [], dropped
    adeg = am1 + am3
    bdeg = bm1 + bm3
    # sort b by degree so the per-chunk cap filter is cheap
    border = np.argsort(bdeg, kind="stable")
    bm1, bm3, bkind, bk1, bk3, bc, bdeg = (arr[border] for arr in
                                           (bm1, bm3, bkind, bk1, bk3, bc, bdeg))
    blocks = []
    step = max(1, _CHUNK // max(1, bc.size))
    for start in range(0, ac.size, step):
        sl = slice(start, min(start + step, ac.size))
        na = sl.stop - sl.start
        ia = np.repeat(np.arange(sl.start, sl.stop), bc.size)
        ib = np.tile(np.arange(bc.size), na)
        ok = adeg[ia] + bdeg[ib] <= max_degree
        if not ok.all():
            bad = ~ok
            dropped += float(np.sum(np.abs(ac[ia[bad]] * bc[ib[bad]])))
            ia, ib = ia[ok], ib[ok]
        if ia.size == 0:
            continue
        blocks.append(_emit_products(
            am1[ia], am3[ia], akind[ia], ak1[ia], ak3[ia], ac[ia],
            bm1[ib], bm3[ib], bkind[ib], bk1[ib], bk3[ib], bc[ib]))
    return blocks, dropped


def _assemble(blocks, trunc, dropped, _validate=True, max_degree=None):
    if not blocks:
        z = PoissonSeries.zero(trunc)
        z.dropped_mass = dropped
        return z
    m1 = np.concatenate([b[0] for b in blocks])
    m3 = np.concatenate([b[1] for b in blocks])
    kind = np.concatenate([b[2] for b in blocks])
    k1 = np.concatenate([b[3] for b in blocks])
    k3 = np.concatenate([b[4] for b in blocks])
    coeff = np.concatenate([b[5] for b in blocks])
    if max_degree is not None:
        keep = m1 + m3 <= max_degree
        if not keep.all():
            dropped += float(np.sum(np.abs(coeff[~keep])))
            m1, m3, kind, k1, k3, coeff = (a[keep] for a in
                                           (m1, m3, kind, k1, k3, coeff))
    return PoissonSeries._from_raw(m1, m3, kind, k1, k3, coeff, trunc,
                                   dropped_mass=dropped, _validate=_validate)


def multiply(a: PoissonSeries, b: PoissonSeries,
             trunc: TruncationPolicy) -> PoissonSeries:
    """Truncated product of two Poisson series.

    Trigonometric factors are linearized with the product-to-sum
    identities; terms whose sqrt-action degree exceeds the policy are
    dropped silently, with the dropped absolute coefficient mass reported
    on ``result.dropped_mass``.
    """
    blocks, dropped = _product_emissions(a, b, trunc.max_sqrtU_degree)
    return _assemble(blocks, trunc, dropped)


def poisson_bracket(f: PoissonSeries, g: PoissonSeries,
                    trunc: TruncationPolicy) -> PoissonSeries:
    """Poisson bracket {f, g} = sum_j (df/du_j dg/dU_j - df/dU_j dg/du_j).

    With this sign convention the motion generated by a Hamiltonian H is
    fdot = {f, H}.  Intermediate negative half-powers cancel pairwise for
    well-formed inputs; a surviving negative-power term above rounding
    noise raises ``SingularDerivativeError``.
    """
    cap = trunc.max_sqrtU_degree
    blocks = []
    dropped = 0.0
    for j in (1, 3):
        fu = f.derivative_angle(j)
        gU = _derivative_action_raw(g, j)
        fU = _derivative_action_raw(f, j)
        gu = g.derivative_angle(j)
        for left, right, sign in ((fu, gU, 1.0), (fU, gu, -1.0)):
            bl, dr = _product_emissions(left, right, cap + 2)
            dropped += dr
            for b in bl:
                blocks.append((b[0], b[1], b[2], b[3], b[4], sign * b[5]))
    result = _assemble(blocks, trunc, dropped, _validate=False, max_degree=cap)
    return _strip_singular(result)


def _derivative_action_raw(s: PoissonSeries, j: int) -> PoissonSeries:
    """d/dU_j allowing the transient m_j = -1 needed inside brackets."""
    m1, m3, kind, k1, k3, c = s.arrays()
    mj = m1 if j == 1 else m3
    live = mj != 0
    m1, m3, kind, k1, k3, c, mj = (a[live] for a in (m1, m3, kind, k1, k3, c, mj))
    new_c = c * (mj / 2.0)
    if j == 1:
        m1 = m1 - 2
    else:
        m3 = m3 - 2
    return PoissonSeries._from_raw(m1, m3, kind, k1, k3, new_c, s.trunc,
                                   _validate=False)


def _strip_singular(s: PoissonSeries, rel_tol: float = 1e-9) -> PoissonSeries:
    """Drop rounding residue on negative-power slots; raise if genuine."""
    if s.is_zero:
        return s
    m1, m3, _, _, _ = _unpack(s._keys)
    neg = (m1 < 0) | (m3 < 0)
    if not neg.any():
        return s
    scale = float(np.abs(s._coeffs[~neg]).max()) if (~neg).any() else 0.0
    bad = neg & (np.abs(s._coeffs) > rel_tol * scale)
    if bad.any():
        i = np.flatnonzero(bad)[0]
        raise SingularDerivativeError(
            f"bracket produced singular term with m=({m1[i]},{m3[i]}), "
            f"coeff {s._coeffs[i]:.3e}")
    keep = ~neg
    return PoissonSeries(s._keys[keep], s._coeffs[keep], s.trunc,
                         s.dropped_mass, _validate=False)


def weighted_norm(f: PoissonSeries, R: WeightVector) -> float:
    """Majorant norm: sum |c| R1^(m1/2) R3^(m3/2) over all terms."""
    if f.is_zero:
        return 0.0
    m1, m3, _, _, _, c = f.arrays()
    w = np.exp(0.5 * (m1 * np.log(R.R1) + m3 * np.log(R.R3)))
    return float(np.sum(np.abs(c) * w))


def homogeneous_part(f: PoissonSeries, s: int) -> PoissonSeries:
    return f.homogeneous_part(s)


def evaluate(f, point) -> float:
    """Evaluate a PoissonSeries at ((U1, U3), (u1, u3)) or a Poly4 at
    (S1, S3, s1, s3)."""
    if isinstance(f, PoissonSeries):
        U, u = point
        return f.evaluate(U, u)
    if isinstance(f, Poly4):
        return f.evaluate(*point)
    raise TypeError(f"cannot evaluate {type(f)!r}")


# -- plain polynomials in (S1, S3, s1, s3) -------------------------------


def _pack4(a, b, c, d):
    return ((a.astype(np.int64) << 24) | (b.astype(np.int64) << 16)
            | (c.astype(np.int64) << 8) | d.astype(np.int64))


def _unpack4(keys):
    return keys >> 24, (keys >> 16) & 0xFF, (keys >> 8) & 0xFF, keys & 0xFF


class Poly4:
    """Sparse polynomial in the translated pair variables
    (S1, S3, s1, s3); key (a, b, c, d) means S1^a S3^b s1^c s3^d."""

    __slots__ = ("_keys", "_coeffs", "trunc")

    def __init__(self, keys, coeffs, trunc):
        keys = np.asarray(keys, dtype=np.int64)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        keys.setflags(write=False)
        coeffs.setflags(write=False)
        self._keys = keys
        self._coeffs = coeffs
        self.trunc = trunc

    @classmethod
    def zero(cls, trunc: TruncationPolicy) -> "Poly4":
        return cls(np.empty(0, np.int64), np.empty(0, np.float64), trunc)

    @classmethod
    def from_monomials(cls, items: Iterable[tuple], trunc: TruncationPolicy) -> "Poly4":
        """Build from ((a, b, c, d), coeff) pairs, merging duplicates."""
        rows = list(items)
        if not rows:
            return cls.zero(trunc)
        expo = np.array([r[0] for r in rows], dtype=np.int64)
        coeffs = np.array([r[1] for r in rows], dtype=np.float64)
        if (expo < 0).any():
            raise DomainError("negative exponent in Poly4 monomial")
        if (expo.sum(axis=1) > trunc.max_poly_degree).any():
            raise DomainError("monomial degree exceeds truncation policy")
        keys, vals = _reduce(
            _pack4(expo[:, 0], expo[:, 1], expo[:, 2], expo[:, 3]), coeffs)
        return cls(keys, vals, trunc)

    def __len__(self):
        return int(self._keys.size)

    @property
    def is_zero(self) -> bool:
        return self._keys.size == 0

    def monomials(self):
        a, b, c, d = _unpack4(self._keys)
        return a, b, c, d, self._coeffs

    def items(self):
        a, b, c, d, coeffs = self.monomials()
        for i in range(len(self)):
            yield (int(a[i]), int(b[i]), int(c[i]), int(d[i])), float(coeffs[i])

    def coefficient(self, expo: tuple) -> float:
        key = _pack4(*(np.array([e]) for e in expo))
        idx = np.searchsorted(self._keys, key[0])
        if idx < self._keys.size and self._keys[idx] == key[0]:
            return float(self._coeffs[idx])
        return 0.0

    def degrees(self):
        a, b, c, d = _unpack4(self._keys)
        return a + b + c + d

    def max_degree(self) -> int:
        return int(self.degrees().max()) if len(self) else 0

    def homogeneous_part(self, s: int) -> "Poly4":
        mask = self.degrees() == s
        return Poly4(self._keys[mask], self._coeffs[mask], self.trunc)

    def __add__(self, other: "Poly4") -> "Poly4":
        keys, vals = _reduce(np.concatenate([self._keys, other._keys]),
                             np.concatenate([self._coeffs, other._coeffs]))
        return Poly4(keys, vals, self.trunc)

    def __neg__(self) -> "Poly4":
        return Poly4(self._keys, -self._coeffs, self.trunc)

    def __sub__(self, other: "Poly4") -> "Poly4":
        return self + (-other)

    def scale(self, factor: float) -> "Poly4":
        return Poly4(self._keys, factor * self._coeffs, self.trunc)

    def multiply(self, other: "Poly4", trunc: TruncationPolicy) -> "Poly4":
        if self.is_zero or other.is_zero:
            return Poly4.zero(trunc)
        a1, b1, c1, d1, v1 = self.monomials()
        a2, b2, c2, d2, v2 = other.monomials()
        ia = np.repeat(np.arange(v1.size), v2.size)
        ib = np.tile(np.arange(v2.size), v1.size)
        a = a1[ia] + a2[ib]
        b = b1[ia] + b2[ib]
        c = c1[ia] + c2[ib]
        d = d1[ia] + d2[ib]
        vals = v1[ia] * v2[ib]
        keep = a + b + c + d <= trunc.max_poly_degree
        keys, out = _reduce(_pack4(a[keep], b[keep], c[keep], d[keep]), vals[keep])
        return Poly4(keys, out, trunc)

    def evaluate(self, S1: float, S3: float, s1: float, s3: float) -> float:
        if self.is_zero:
            return 0.0
        a, b, c, d, coeffs = self.monomials()
        val = coeffs * _ipow(S1, a) * _ipow(S3, b) * _ipow(s1, c) * _ipow(s3, d)
        return float(val.sum())

    def substitute_linear(self, matrix) -> "Poly4":
        """Substitute variables by linear forms: old_i = sum_j M[i][j] new_j.

        ``matrix`` is 4x4, row order (S1, S3, s1, s3).
        """
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape != (4, 4):
            raise DomainError("substitution matrix must be 4x4")
        expansions = {}

        def var_power(i, n):
            # expansion of (sum_j M[i,j] x_j)^n as {exponent4: coeff}
            key = (i, n)
            if key in expansions:
                return expansions[key]
            if n == 0:
                out = {(0, 0, 0, 0): 1.0}
            else:
                prev = var_power(i, n - 1)
                out = {}
                for expo, cf in prev.items():
                    for jvar in range(4):
                        mj = M[i, jvar]
                        if mj == 0.0:
                            continue
                        new = list(expo)
                        new[jvar] += 1
                        new = tuple(new)
                        out[new] = out.get(new, 0.0) + cf * mj
            expansions[key] = out
            return out

        acc: dict = {}
        for (a, b, c, d), coeff in self.items():
            parts = [var_power(0, a), var_power(1, b), var_power(2, c),
                     var_power(3, d)]
            cur = {(0, 0, 0, 0): coeff}
            for part in parts:
                if part == {(0, 0, 0, 0): 1.0}:
                    continue
                nxt: dict = {}
                for e1, v1 in cur.items():
                    for e2, v2 in part.items():
                        e = (e1[0] + e2[0], e1[1] + e2[1],
                             e1[2] + e2[2], e1[3] + e2[3])
                        nxt[e] = nxt.get(e, 0.0) + v1 * v2
                cur = nxt
            for e, v in cur.items():
                acc[e] = acc.get(e, 0.0) + v
        items = [(e, v) for e, v in acc.items() if v != 0.0]
        return Poly4.from_monomials(items, self.trunc)

    def to_text(self) -> str:
        a, b, c, d, coeffs = self.monomials()
        order = np.lexsort((d, c, b, a, a + b + c + d))
        lines = [f"{float(coeffs[i])!r} {int(a[i])} {int(b[i])} {int(c[i])} {int(d[i])}"
                 for i in order]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, trunc: TruncationPolicy) -> "Poly4":
        items = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            coeff, a, b, c, d = line.split()
            items.append(((int(a), int(b), int(c), int(d)), float(coeff)))
        return cls.from_monomials(items, trunc)

    def __repr__(self):
        return f"Poly4({len(self)} monomials, max degree {self.max_degree()})"


def _half_pow(U: float, m) -> np.ndarray:
    """U^(m/2) for integer exponent arrays, with 0^0 = 1."""
    if U > 0.0:
        return np.exp(0.5 * m * np.log(U))
    return np.where(m == 0, 1.0, 0.0)


def _ipow(x: float, n) -> np.ndarray:
    n = np.asarray(n)
    if x == 0.0:
        return np.where(n == 0, 1.0, 0.0)
    return np.exp(n * np.log(abs(x))) * np.where((n % 2 == 1) & (x < 0), -1.0, 1.0)
