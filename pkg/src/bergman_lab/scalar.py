"""Coefficient arithmetic shared by the symbolic layers.

Three coefficient kinds flow through the calculus:

* :class:`PiRational` -- an exact Laurent polynomial in a formal symbol
  ``Pi`` (standing for the number pi) with Gaussian-rational coefficients.
  Plain Gaussian rationals are the grade-zero elements.
* Python ``complex`` -- the floating-point mode.
* :class:`Mat` -- a small square matrix whose entries are either of the
  above, used when the auxiliary bundle has rank larger than one.

The :class:`Arith` context bundles the conversions and comparison rules for
one computation so downstream code never branches on the mode itself.
"""

from __future__ import annotations

import cmath
import math
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Union


from gmpy2 import mpq

__all__ = [
    "NonMonomialDivision",
    "PiRational",
    "Mat",
    "Arith",
    "conj",
    "to_complex",
]

_ZERO = mpq(0)


class NonMonomialDivision(ArithmeticError):
    """Raised when an exact division would need a non-monomial divisor."""


def _q(x) -> mpq:
    if isinstance(x, mpq):
        return x
    if isinstance(x, Fraction):
        return mpq(x.numerator, x.denominator)
    if isinstance(x, (int, Rational)):
        return mpq(x)
    if isinstance(x, float):
        if not x.is_integer():
            raise TypeError("float values are not exact; pass a Fraction")
        return mpq(int(x))
    raise TypeError(f"cannot convert {type(x).__name__} to an exact rational")


class PiRational:
    """Exact element of Q(i)[Pi, 1/Pi].

    Stored as a mapping ``grade -> (real, imag)`` with ``gmpy2.mpq`` parts;
    zero components are never stored, so equality is map equality.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: dict | None = None):
        self.terms = terms if terms is not None else {}

    # construction -------------------------------------------------------
    @classmethod
    def of(cls, re=0, im=0, grade: int = 0) -> "PiRational":
        r, i = _q(re), _q(im)
        if not r and not i:
            return cls({})
        return cls({grade: (r, i)})

    @classmethod
    def pi(cls, power: int = 1) -> "PiRational":
        return cls({power: (mpq(1), _ZERO)})

    @classmethod
    def coerce(cls, x) -> "PiRational":
        if isinstance(x, PiRational):
            return x
        if isinstance(x, complex):
            return cls.of(_q(x.real), _q(x.imag))
        return cls.of(x)

    # predicates ---------------------------------------------------------
    def __bool__(self) -> bool:
        return bool(self.terms)

    def is_monomial(self) -> bool:
        return len(self.terms) == 1

    @property
    def grades(self) -> tuple[int, ...]:
        return tuple(sorted(self.terms))

    def __eq__(self, other) -> bool:
        if isinstance(other, PiRational):
            return self.terms == other.terms
        if isinstance(other, (int, Fraction, mpq)):
            return self.terms == PiRational.of(other).terms
        return NotImplemented

    def __hash__(self) -> int:
        return hash(frozenset(self.terms.items()))

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if not isinstance(other, PiRational):
            if isinstance(other, (int, Fraction, mpq)):
                other = PiRational.of(other)
            else:
                return NotImplemented
        out = dict(self.terms)
        for k, (r, i) in other.terms.items():
            if k in out:
                r0, i0 = out[k]
                r1, i1 = r0 + r, i0 + i
                if r1 or i1:
                    out[k] = (r1, i1)
                else:
                    del out[k]
            else:
                out[k] = (r, i)
        return PiRational(out)

    __radd__ = __add__

    def __neg__(self):
        return PiRational({k: (-r, -i) for k, (r, i) in self.terms.items()})

    def __sub__(self, other):
        if not isinstance(other, PiRational):
            if isinstance(other, (int, Fraction, mpq)):
                other = PiRational.of(other)
            else:
                return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, PiRational):
            a, b = self.terms, other.terms
            if len(a) == 1 and len(b) == 1:
                (k1, (r1, i1)), = a.items()
                (k2, (r2, i2)), = b.items()
                return PiRational({k1 + k2: (r1 * r2 - i1 * i2, r1 * i2 + i1 * r2)})
            out: dict = {}
            for k1, (r1, i1) in a.items():
                for k2, (r2, i2) in b.items():
                    k = k1 + k2
                    re = r1 * r2 - i1 * i2
                    im = r1 * i2 + i1 * r2
                    if k in out:
                        r0, i0 = out[k]
                        out[k] = (r0 + re, i0 + im)
                    else:
                        out[k] = (re, im)
            return PiRational({k: v for k, v in out.items() if v[0] or v[1]})
        if isinstance(other, (int, Fraction, mpq)):
            s = _q(other)
            if not s:
                return PiRational({})
            return PiRational({k: (r * s, i * s) for k, (r, i) in self.terms.items()})
        return NotImplemented

    __rmul__ = __mul__

    def inverse(self) -> "PiRational":
        if len(self.terms) != 1:
            raise NonMonomialDivision(f"cannot invert non-monomial {self!r}")
        (k, (r, i)), = self.terms.items()
        d = r * r + i * i
        return PiRational({-k: (r / d, -i / d)})

    def __truediv__(self, other):
        if isinstance(other, (int, Fraction, mpq)):
            return self * (mpq(1) / _q(other))
        if isinstance(other, PiRational):
            return self * other.inverse()
        return NotImplemented

    def __rtruediv__(self, other):
        return PiRational.coerce(other) * self.inverse()

    def __pow__(self, e: int):
        if e < 0:
            return self.inverse() ** (-e)
        out = PiRational.of(1)
        base = self
        while e:
            if e & 1:
                out = out * base
            base = base * base
            e >>= 1
        return out

    def conj(self) -> "PiRational":
        return PiRational({k: (r, -i) for k, (r, i) in self.terms.items()})

    conjugate = conj

    @property
    def real(self) -> "PiRational":
        return PiRational({k: (r, _ZERO) for k, (r, i) in self.terms.items() if r})

    @property
    def imag(self) -> "PiRational":
        return PiRational({k: (i, _ZERO) for k, (r, i) in self.terms.items() if i})

    def to_complex(self) -> complex:
        acc = 0j
        for k, (r, i) in self.terms.items():
            acc += complex(float(r), float(i)) * math.pi ** k
        return acc

    def __complex__(self) -> complex:
        return self.to_complex()

    def __repr__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for k in sorted(self.terms):
            r, i = self.terms[k]
            c = _fmt_gauss(r, i)
            if k == 0:
                parts.append(c)
            elif k == 1:
                parts.append(f"{c}*Pi")
            else:
                parts.append(f"{c}*Pi^{k}")
        return " + ".join(parts)


def _fmt_gauss(r: mpq, i: mpq) -> str:
    if not i:
        return str(r)
    if not r:
        return f"({i})i"
    return f"({r}+{i}i)"


def conj(c):
    """Complex conjugate (conjugate transpose for matrices)."""
    if isinstance(c, (int, float, Fraction, mpq)):
        return c
    if isinstance(c, complex):
        return c.conjugate()
    return c.conj()


def to_complex(c) -> complex:
    if isinstance(c, PiRational):
        return c.to_complex()
    if isinstance(c, Mat):
        raise TypeError("matrix coefficient has no scalar value")
    return complex(c)


class Mat:
    """Square matrix coefficient; products keep operator order."""

    __slots__ = ("rows",)

    def __init__(self, rows):
        self.rows = tuple(tuple(r) for r in rows)

    @property
    def size(self) -> int:
        return len(self.rows)

    @classmethod
    def scalar(cls, value, size: int, zero) -> "Mat":
        return cls([[value if i == j else zero for j in range(size)] for i in range(size)])

    def __bool__(self) -> bool:
        return any(bool(x) for r in self.rows for x in r)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mat):
            return NotImplemented
        return self.rows == other.rows

    def __hash__(self):
        return hash(self.rows)

    def __add__(self, other):
        if not isinstance(other, Mat):
            return NotImplemented
        return Mat([[x + y for x, y in zip(r, s)] for r, s in zip(self.rows, other.rows)])

    def __sub__(self, other):
        if not isinstance(other, Mat):
            return NotImplemented
        return Mat([[x - y for x, y in zip(r, s)] for r, s in zip(self.rows, other.rows)])

    def __neg__(self):
        return Mat([[-x for x in r] for r in self.rows])

    def __mul__(self, other):
        if isinstance(other, Mat):
            cols = list(zip(*other.rows))
            out = []
            for r in self.rows:
                row = []
                for c in cols:
                    acc = r[0] * c[0]
                    for x, y in zip(r[1:], c[1:]):
                        acc = acc + x * y
                    row.append(acc)
                out.append(row)
            return Mat(out)
        if isinstance(other, (PiRational, complex, int, float, Fraction, mpq)):
            return Mat([[x * other for x in r] for r in self.rows])
        return NotImplemented

    def __rmul__(self, other):
        if isinstance(other, (PiRational, complex, int, float, Fraction, mpq)):
            return Mat([[other * x for x in r] for r in self.rows])
        return NotImplemented

    def conj(self) -> "Mat":
        """Conjugate transpose."""
        return Mat([[conj(self.rows[j][i]) for j in range(self.size)] for i in range(self.size)])

    def trace(self):
        acc = self.rows[0][0]
        for i in range(1, self.size):
            acc = acc + self.rows[i][i]
        return acc

    def to_numpy(self):
        import numpy as np

        return np.array([[to_complex(x) for x in r] for r in self.rows], dtype=complex)

    def __repr__(self) -> str:
        return "Mat(" + repr([list(r) for r in self.rows]) + ")"


Number = Union[PiRational, complex]


class Arith:
    """Arithmetic context: coefficient mode, bundle rank and tolerances.

    ``mode`` is ``"exact"`` (``PiRational`` coefficients) or ``"float"``
    (``complex`` coefficients).  ``rtol`` is the relative tolerance used by
    :meth:`close` in float mode and ``drop`` the relative size below which
    float coefficients are discarded during canonicalization.
    """

    def __init__(self, mode: str = "exact", rank: int = 1, rtol: float = 1e-10, drop: float = 1e-14):
        if mode not in ("exact", "float"):
            raise ValueError(f"unknown mode {mode!r}")
        if rank < 1:
            raise ValueError("rank must be positive")
        self.mode = mode
        self.rank = rank
        self.rtol = rtol
        self.drop = drop

    @property
    def exact(self) -> bool:
        return self.mode == "exact"

    def __eq__(self, other):
        return isinstance(other, Arith) and (self.mode, self.rank) == (other.mode, other.rank)

    def __hash__(self):
        return hash((self.mode, self.rank))

    def __repr__(self):
        return f"Arith(mode={self.mode!r}, rank={self.rank})"

    # scalars -------------------------------------------------------------
    def s(self, x, im=0) -> Number:
        """Convert ``x`` (+ ``i*im``) to a scalar of this mode."""
        if self.exact:
            if isinstance(x, PiRational):
                return x if not im else x + PiRational.of(0, im)
            if isinstance(x, complex):
                return PiRational.of(_q(x.real), _q(x.imag))
            return PiRational.of(x, im)
        return complex(to_complex(x) if isinstance(x, PiRational) else x) + 1j * float(im)

    @property
    def zero(self) -> Number:
        return self.s(0)

    @property
    def one(self) -> Number:
        return self.s(1)

    @property
    def i(self) -> Number:
        return self.s(0, 1)

    @property
    def pi(self) -> Number:
        return PiRational.pi() if self.exact else complex(math.pi)

    def inv(self, x) -> Number:
        if self.exact:
            return PiRational.coerce(x).inverse()
        return 1.0 / complex(x)

    # coefficients (scalar or matrix) -----------------------------------
    @property
    def ident(self):
        """Identity coefficient: scalar 1 or the identity matrix."""
        if self.rank == 1:
            return self.one
        return Mat.scalar(self.one, self.rank, self.zero)

    def coeff(self, x):
        """Promote a scalar or nested list to a coefficient of this rank."""
        if self.rank == 1:
            if isinstance(x, Mat):
                if x.size != 1:
                    raise ValueError("matrix coefficient in rank-1 context")
                return x.rows[0][0]
            return self.s(x)
        if isinstance(x, Mat):
            return x
        if isinstance(x, (list, tuple)):
            return Mat([[self.s(v) for v in row] for row in x])
        return Mat.scalar(self.s(x), self.rank, self.zero)

    def matrix(self, rows) -> "Mat | Number":
        if self.rank == 1:
            return self.s(rows[0][0]) if isinstance(rows, (list, tuple)) else self.s(rows)
        return Mat([[self.s(v) for v in r] for r in rows])

    def is_zero(self, c) -> bool:
        if self.exact:
            return not c
        return self.magnitude(c) == 0.0

    def magnitude(self, c) -> float:
        if isinstance(c, Mat):
            return max(abs(to_complex(x)) for r in c.rows for x in r)
        if isinstance(c, PiRational):
            return abs(c.to_complex())
        if hasattr(c, "magnitude"):
            return c.magnitude()
        return abs(c)

    def close(self, x, y, rtol: float | None = None) -> bool:
        """Equality predicate: exact in exact mode, relative in float mode."""
        if self.exact and not isinstance(x, complex) and not isinstance(y, complex):
            return not (x - y)
        tol = self.rtol if rtol is None else rtol
        scale = max(self.magnitude(x), self.magnitude(y), 1.0)
        return self.magnitude(x - y) <= tol * scale

    def prune(self, data: dict) -> dict:
        """Drop negligible coefficients (float mode only)."""
        if self.exact or not data:
            return data
        mags = {k: self.magnitude(v) for k, v in data.items()}
        top = max(mags.values())
        cut = self.drop * top
        return {k: v for k, v in data.items() if mags[k] > cut}


def complex_of(values: Iterable) -> list[complex]:
    return [to_complex(v) for v in values]


def phase(c) -> float:
    return cmath.phase(to_complex(c))


