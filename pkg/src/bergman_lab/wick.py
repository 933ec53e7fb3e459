"""Symbolic calculus on the Bargmann-Fock model.

The model operator lives on functions of ``Z in R^{2n}`` written through the
complex coordinates ``z_j = Z_{2j-1} + i Z_{2j}``.  For positive numbers
``a_1..a_n`` the ladder operators are::

    b_j  = -2 d/dz_j    + (a_j/2) zbar_j
    b+_j =  2 d/dzbar_j + (a_j/2) z_j

with ``[b_i, b+_j] = -2 a_i delta_ij`` and the harmonic oscillator
``L0 = sum_j b_j b+_j`` whose spectrum is ``{2 beta.a}``.  Its kernel
projection has the Gaussian kernel

    P(Z, Z') = prod(a_j)/(2 pi)^n * exp(-1/4 sum_j a_j (|z_j|^2 + |z'_j|^2 - 2 z_j zbar'_j)).

Three containers carry the algebra:

``KernelPoly``
    ``Q(z, zbar, z', zbar') * P(Z, Z')`` stored as ``{exponents: coeff}``.
``NormalKernel``
    ``sum_beta b^beta (Q_beta(z; z', zbar') P)`` with holomorphic ``Q_beta``;
    the ``beta``-block is an ``L0`` eigenvector with eigenvalue ``2 beta.a``.
``DiffOp``
    normal-ordered words ``c z^alpha zbar^beta b^gamma (b+)^delta``.

Every operator acts on the first kernel variable; the primed variables are
passive parameters.  Keys are flat integer tuples of length ``4n``; a
``NormalKernel`` may carry one extra trailing key component, a *pole
signature*, used by the resolvent calculus (see :class:`RationalLambda`).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Iterable, Iterator, Sequence

from .scalar import Arith, Mat, NonMonomialDivision, PiRational, conj, to_complex

__all__ = [
    "ModelSpec",
    "KernelPoly",
    "NormalKernel",
    "DiffOp",
    "RationalLambda",
    "normal_order",
    "apply",
    "apply_normal",
    "to_normal",
    "from_normal",
    "project_N",
    "inv_L0_perp",
    "resolvent",
    "residue_at_zero",
    "pn_value",
    "eval_at_origin",
    "adjoint",
    "model_spectrum",
    "pn_kernel",
    "generator",
]


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complex dimension and the eigenvalues ``a`` of the model curvature."""

    a: tuple
    arith: Arith = field(default_factory=Arith)

    def __post_init__(self):
        a = tuple(self.arith.s(x) for x in self.a)
        if not a:
            raise ValueError("need at least one eigenvalue")
        for x in a:
            v = to_complex(x)
            if abs(v.imag) > 1e-300 or v.real <= 0:
                raise ValueError(f"model eigenvalues must be positive reals, got {x!r}")
            if self.arith.exact and not x.is_monomial():
                raise NonMonomialDivision(f"eigenvalue {x!r} is not a monomial")
        object.__setattr__(self, "a", a)

    @classmethod
    def kahler(cls, n: int, arith: Arith | None = None) -> "ModelSpec":
        arith = arith or Arith()
        return cls(tuple(2 * arith.pi for _ in range(n)), arith)

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def rank(self) -> int:
        return self.arith.rank

    @cached_property
    def tau0(self):
        acc = self.arith.zero
        for x in self.a:
            acc = acc + x
        return acc

    @cached_property
    def gap(self):
        return 2 * min(self.a, key=lambda x: to_complex(x).real)

    @cached_property
    def inv_a(self) -> tuple:
        return tuple(self.arith.inv(x) for x in self.a)

    @cached_property
    def _apow_cache(self) -> dict:
        return {}

    @cached_property
    def _root_values(self) -> dict:
        return {}

    def apow(self, powers: tuple) -> object:
        """``prod_i a_i ** powers[i]`` (cached)."""
        cache = self._apow_cache
        val = cache.get(powers)
        if val is None:
            val = self.arith.one
            for i, e in enumerate(powers):
                if e > 0:
                    for _ in range(e):
                        val = val * self.a[i]
                elif e < 0:
                    for _ in range(-e):
                        val = val * self.inv_a[i]
            cache[powers] = val
        return val

    def eigenvalue(self, beta: Sequence[int]):
        """``2 beta.a``, the ``L0`` eigenvalue of a ``b^beta`` block."""
        acc = self.arith.zero
        for b, x in zip(beta, self.a):
            if b:
                acc = acc + (2 * b) * x
        return acc

    @cached_property
    def pn_origin(self):
        """``P(0, 0) = prod(a)/(2 pi)^n``."""
        val = self.arith.one
        for x in self.a:
            val = val * x
        two_pi = 2 * self.arith.pi
        for _ in range(self.n):
            val = val * self.arith.inv(two_pi)
        return val

    def same(self, other: "ModelSpec") -> bool:
        return self is other or (self.arith == other.arith and self.a == other.a)

    def __repr__(self):
        return f"ModelSpec(a={self.a!r}, mode={self.arith.mode!r}, rank={self.rank})"


def _check_model(x, y):
    if not x.model.same(y.model):
        raise ValueError("objects belong to different models")


# ---------------------------------------------------------------------------
# shared map container


class _TermMap:
    """Immutable ``{key tuple: coefficient}`` map over a model."""

    __slots__ = ("model", "data")

    def __init__(self, model: ModelSpec, data: dict | None = None):
        self.model = model
        data = data or {}
        arith = model.arith
        if arith.exact:
            self.data = {k: v for k, v in data.items() if v}
        else:
            self.data = arith.prune({k: v for k, v in data.items() if arith.magnitude(v) > 0})

    def _new(self, data):
        return type(self)(self.model, data)

    def __len__(self):
        return len(self.data)

    def __bool__(self):
        return bool(self.data)

    def __iter__(self) -> Iterator:
        return iter(self.data.items())

    def items(self):
        return self.data.items()

    def __add__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        _check_model(self, other)
        out = dict(self.data)
        for k, v in other.data.items():
            out[k] = out[k] + v if k in out else v
        return self._new(out)

    def __neg__(self):
        return self._new({k: -v for k, v in self.data.items()})

    def __sub__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        return self + (-other)

    def scale(self, c):
        """Left-multiply every coefficient by ``c``."""
        return self._new({k: c * v for k, v in self.data.items()})

    def rscale(self, c):
        return self._new({k: v * c for k, v in self.data.items()})

    def __eq__(self, other):
        if not isinstance(other, type(self)):
            return NotImplemented
        if not self.model.same(other.model):
            return False
        arith = self.model.arith
        if arith.exact:
            return self.data == other.data
        diff = (self - other).data
        scale = max([arith.magnitude(v) for v in self.data.values()]
                    + [arith.magnitude(v) for v in other.data.values()] + [1.0])
        return all(arith.magnitude(v) <= arith.rtol * scale for v in diff.values())

    __hash__ = None

    def is_zero(self) -> bool:
        return not self.data

    def max_magnitude(self) -> float:
        arith = self.model.arith
        return max((arith.magnitude(v) for v in self.data.values()), default=0.0)

    def _split(self, key):
        n = self.model.n
        return key[:n], key[n:2 * n], key[2 * n:3 * n], key[3 * n:4 * n]


# ---------------------------------------------------------------------------
# integer helpers


@lru_cache(maxsize=None)
def _falling(x: int, k: int) -> int:
    out = 1
    for j in range(k):
        out *= x - j
    return out


_binom = math.comb


# ---------------------------------------------------------------------------
# DiffOp


class DiffOp(_TermMap):
    """Normal-ordered polynomial differential operator.

    Keys are ``alpha + beta + gamma + delta`` (each length ``n``) for the
    word ``z^alpha zbar^beta b^gamma (b+)^delta``.
    """

    __slots__ = ()

    @classmethod
    def const(cls, model: ModelSpec, c=None) -> "DiffOp":
        c = model.arith.ident if c is None else model.arith.coeff(c)
        return cls(model, {(0,) * (4 * model.n): c})

    @classmethod
    def zero(cls, model: ModelSpec) -> "DiffOp":
        return cls(model, {})

    def __mul__(self, other):
        if isinstance(other, DiffOp):
            _check_model(self, other)
            return _diffop_product(self, other)
        return self.rscale(other)

    def __rmul__(self, other):
        return self.scale(other)

    def adjoint(self) -> "DiffOp":
        """Formal L2 adjoint: ``z* = zbar``, ``b* = b+``, coefficients conjugated."""
        model = self.model
        n = model.n
        out = DiffOp.zero(model)
        for key, c in self.data.items():
            al, be, ga, de = self._split(key)
            ladder = DiffOp(model, {(0,) * (2 * n) + de + ga: model.arith.ident})
            mult = DiffOp(model, {be + al + (0,) * (2 * n): conj(c)})
            out = out + ladder * mult
        return out

    def commutator(self, other: "DiffOp") -> "DiffOp":
        return self * other - other * self

    def degree_parities(self) -> set[int]:
        """Parities of ``|alpha|+|beta|+|gamma|+|delta|`` over all terms."""
        return {sum(k) % 2 for k in self.data}

    def max_degree(self) -> int:
        return max((sum(k) for k in self.data), default=0)

    def dump(self) -> str:
        lines = []
        for key in sorted(self.data):
            al, be, ga, de = self._split(key)
            lines.append(f"{self.data[key]!r} * z^{_fmt(al)} zbar^{_fmt(be)} b^{_fmt(ga)} b+^{_fmt(de)}")
        return "\n".join(lines)

    def __repr__(self):
        return f"DiffOp({len(self.data)} terms)"


def _fmt(idx) -> str:
    return " ".join(str(x) for x in idx)


@lru_cache(maxsize=None)
def _product_1d(al, be, ga, de, al2, be2, ga2, de2) -> tuple:
    """One index of ``(z^al zbar^be b^ga b+^de)(z^al2 zbar^be2 b^ga2 b+^de2)``.

    Returns ``((al', be', ga', de'), int factor, power of a)`` tuples.
    """
    acc: dict = {}
    for kap in range(min(de, be2) + 1):
        c1 = _binom(de, kap) * 2 ** kap * _falling(be2, kap)
        for nu in range(min(ga, al2) + 1):
            c2 = c1 * _binom(ga, nu) * (-2) ** nu * _falling(al2, nu)
            rest = de - kap
            for mu in range(min(rest, ga2) + 1):
                c3 = c2 * _binom(rest, mu) * _binom(ga2, mu) * math.factorial(mu) * 2 ** mu
                key = ((al + al2 - nu, be + be2 - kap, ga - nu + ga2 - mu, rest - mu + de2), mu)
                acc[key] = acc.get(key, 0) + c3
    return tuple((k[0], v, k[1]) for k, v in acc.items() if v)


def _diffop_product(x: DiffOp, y: DiffOp) -> DiffOp:
    model = x.model
    n = model.n
    out: dict = {}
    for kx, cx in x.data.items():
        ax = (kx[:n], kx[n:2 * n], kx[2 * n:3 * n], kx[3 * n:])
        for ky, cy in y.data.items():
            lists = []
            for i in range(n):
                opts = _product_1d(ax[0][i], ax[1][i], ax[2][i], ax[3][i],
                                   ky[i], ky[n + i], ky[2 * n + i], ky[3 * n + i])
                if not opts:
                    break
                lists.append(opts)
            else:
                cxy = cx * cy
                for combo in itertools.product(*lists):
                    f = 1
                    pw = []
                    for _, fi, pi in combo:
                        f *= fi
                        pw.append(pi)
                    key = (tuple(c[0][0] for c in combo) + tuple(c[0][1] for c in combo)
                           + tuple(c[0][2] for c in combo) + tuple(c[0][3] for c in combo))
                    val = cxy * (model.apow(tuple(pw)) * f)
                    out[key] = out[key] + val if key in out else val
    return DiffOp(model, out)


def generator(model: ModelSpec, kind: str, i: int) -> DiffOp:
    """Single generator ``z``, ``zbar``, ``b`` or ``b+`` with index ``i``."""
    n = model.n
    if not 0 <= i < n:
        raise IndexError(f"generator index {i} out of range for n={n}")
    slot = {"z": 0, "zbar": 1, "b": 2, "b+": 3}[kind]
    key = [0] * (4 * n)
    key[slot * n + i] = 1
    return DiffOp(model, {tuple(key): model.arith.ident})


def normal_order(model: ModelSpec, word: Iterable[tuple[str, int]], prefactor=None) -> DiffOp:
    """Normal-ordered form of ``prefactor * g_1 g_2 ... g_k``.

    ``word`` holds ``(kind, index)`` pairs with ``kind`` one of ``"z"``,
    ``"zbar"``, ``"b"``, ``"b+"``.
    """
    out = DiffOp.const(model, prefactor)
    for kind, i in word:
        out = out * generator(model, kind, i)
    return out


# ---------------------------------------------------------------------------
# KernelPoly


class KernelPoly(_TermMap):
    """Kernel ``Q(z, zbar, z', zbar') P(Z, Z')``; keys ``z + zbar + z' + zbar'``."""

    __slots__ = ()

    @classmethod
    def zero(cls, model: ModelSpec) -> "KernelPoly":
        return cls(model, {})

    def degree(self) -> int:
        return max((sum(k) for k in self.data), default=0)

    def degree_parities(self) -> set[int]:
        return {sum(k) % 2 for k in self.data}

    def constant_term(self):
        return self.data.get((0,) * (4 * self.model.n), self.model.arith.zero
                             if self.model.rank == 1 else self.model.arith.coeff(0))

    def evaluate(self, Z: Sequence[float], Zp: Sequence[float]):
        """Numerical value at real points ``Z``, ``Z'`` (complex or matrix)."""
        import numpy as np

        model = self.model
        n = model.n
        z = [complex(Z[2 * j], Z[2 * j + 1]) for j in range(n)]
        zp = [complex(Zp[2 * j], Zp[2 * j + 1]) for j in range(n)]
        vars_ = z + [w.conjugate() for w in z] + zp + [w.conjugate() for w in zp]
        acc = 0
        for key, c in self.data.items():
            mono = 1 + 0j
            for v, e in zip(vars_, key):
                if e:
                    mono *= v ** e
            cv = c.to_numpy() if isinstance(c, Mat) else to_complex(c)
            acc = acc + cv * mono
        if isinstance(acc, int):
            acc = np.zeros((model.rank, model.rank), complex) if model.rank > 1 else 0j
        return acc * pn_value(model, Z, Zp)

    def dump(self) -> str:
        """One term per line: ``coeff * z^a zbar^b z'^c zbar'^d``."""
        lines = []
        for key in sorted(self.data):
            a, b, c, d = self._split(key)
            lines.append(f"{self.data[key]!r} * z^{_fmt(a)} zbar^{_fmt(b)} z'^{_fmt(c)} zbar'^{_fmt(d)}")
        return "\n".join(lines)

    def __repr__(self):
        return f"KernelPoly({len(self.data)} terms)"


def pn_kernel(model: ModelSpec) -> KernelPoly:
    """The kernel ``P`` itself (polynomial part 1)."""
    return KernelPoly(model, {(0,) * (4 * model.n): model.arith.ident})


def adjoint(k: KernelPoly) -> KernelPoly:
    """Kernel of the adjoint operator: ``K*(Z, Z') = K(Z', Z)^*``."""
    out = {}
    for key, c in k.data.items():
        a, b, cc, d = k._split(key)
        out[d + cc + b + a] = conj(c)
    return KernelPoly(k.model, out)


def eval_at_origin(k: KernelPoly):
    """Polynomial part of the kernel at ``Z = Z' = 0`` (the factor ``P(0,0)`` excluded)."""
    return k.constant_term()


def pn_value(model: ModelSpec, Z: Sequence[float], Zp: Sequence[float]) -> complex:
    """Numerical ``P(Z, Z')`` at real points."""
    n = model.n
    expo = 0j
    scale = 1.0
    for j in range(n):
        a = to_complex(model.a[j]).real
        z = complex(Z[2 * j], Z[2 * j + 1])
        w = complex(Zp[2 * j], Zp[2 * j + 1])
        expo += -0.25 * a * (abs(z) ** 2 + abs(w) ** 2 - 2 * z * w.conjugate())
        scale *= a / (2 * math.pi)
    return scale * complex(math.e) ** expo if expo else complex(scale)


# ---------------------------------------------------------------------------
# NormalKernel


class NormalKernel(_TermMap):
    """``sum_beta b^beta (Q_beta(z; z', zbar') P)``; keys ``beta + z + z' + zbar'``.

    An optional trailing key entry holds a pole signature (a sorted tuple
    of ``(root, multiplicity)`` pairs) so that resolvent factors
    ``1/prod(lambda - root)^m`` ride along with the scalar coefficient.
    """

    __slots__ = ()

    @classmethod
    def zero(cls, model: ModelSpec) -> "NormalKernel":
        return cls(model, {})

    @classmethod
    def pn(cls, model: ModelSpec) -> "NormalKernel":
        return cls(model, {(0,) * (4 * model.n): model.arith.ident})

    def eigen_blocks(self) -> dict:
        """Group terms by ``beta``."""
        n = self.model.n
        out: dict = {}
        for key, c in self.data.items():
            out.setdefault(key[:n], {})[key] = c
        return {b: NormalKernel(self.model, d) for b, d in out.items()}

    def map_blocks(self, fn: Callable) -> "NormalKernel":
        """Multiply each term by ``fn(beta)``; ``None`` drops the term."""
        n = self.model.n
        cache: dict = {}
        out = {}
        for key, c in self.data.items():
            beta = key[:n]
            if beta not in cache:
                cache[beta] = fn(beta)
            f = cache[beta]
            if f is not None:
                out[key] = c * f
        return NormalKernel(self.model, out)

    @property
    def has_signatures(self) -> bool:
        return any(len(k) > 4 * self.model.n for k in self.data)

    def with_signature(self) -> "NormalKernel":
        """Attach the empty pole signature to every term."""
        if self.has_signatures:
            return self
        return NormalKernel(self.model, {k + ((),): c for k, c in self.data.items()})

    def coefficients(self) -> dict:
        """Collapse pole signatures: ``{base key: RationalLambda}``."""
        n4 = 4 * self.model.n
        grouped: dict = {}
        for key, c in self.data.items():
            base, sig = key[:n4], (key[n4] if len(key) > n4 else ())
            grouped.setdefault(base, {})[sig] = c
        return {k: RationalLambda(self.model, terms) for k, terms in grouped.items()}

    def residue(self, q: int) -> "NormalKernel":
        """Residue at ``lambda = 0`` of ``lambda^q`` times this kernel."""
        n4 = 4 * self.model.n
        out: dict = {}
        cache: dict = {}
        for key, c in self.data.items():
            if len(key) == n4:
                continue  # holomorphic coefficient, no residue
            base, sig = key[:n4], key[n4]
            if (sig, q) not in cache:
                cache[(sig, q)] = _signature_taylor(self.model, sig, -q - 1)
            f = cache[(sig, q)]
            if f is None:
                continue
            val = c * f
            out[base] = out[base] + val if base in out else val
        return NormalKernel(self.model, out)

    def laurent_coefficient(self, j: int) -> "NormalKernel":
        """Coefficient of ``lambda^j`` in the Laurent expansion at 0."""
        n4 = 4 * self.model.n
        out: dict = {}
        for key, c in self.data.items():
            base, sig = key[:n4], (key[n4] if len(key) > n4 else ())
            f = _signature_taylor(self.model, sig, j)
            if f is None:
                continue
            val = c * f
            out[base] = out[base] + val if base in out else val
        return NormalKernel(self.model, out)

    def pole_order(self) -> int:
        """Order of the pole at ``lambda = 0`` (0 if holomorphic there)."""
        n4 = 4 * self.model.n
        top = max((_sig_zero_mult(k[n4]) for k in self.data if len(k) > n4), default=0)
        for m in range(top, 0, -1):
            if not self.laurent_coefficient(-m).is_zero():
                return m
        return 0

    def project_N(self) -> "NormalKernel":
        n = self.model.n
        return NormalKernel(self.model, {k: c for k, c in self.data.items() if not any(k[:n])})

    def origin_value(self):
        """``(kernel / P)(0, 0)`` using ``b^beta(z^beta P)(0,0) = (-2)^|beta| beta!``."""
        n = self.model.n
        acc = None
        for key, c in self.data.items():
            if len(key) > 4 * n:
                raise ValueError("origin value of a lambda-dependent kernel")
            beta, z, zp, zbp = key[:n], key[n:2 * n], key[2 * n:3 * n], key[3 * n:4 * n]
            if beta != z or any(zp) or any(zbp):
                continue
            f = 1
            for b in beta:
                f *= (-2) ** b * math.factorial(b)
            val = c * f
            acc = val if acc is None else acc + val
        if acc is None:
            return self.model.arith.coeff(0)
        return acc

    def dump(self) -> str:
        lines = []
        for key in sorted(self.data, key=repr):
            b, z, zp, zbp = self._split(key)
            sig = f" / {key[4 * self.model.n]!r}" if len(key) > 4 * self.model.n else ""
            lines.append(f"{self.data[key]!r}{sig} * b^{_fmt(b)} z^{_fmt(z)} z'^{_fmt(zp)} zbar'^{_fmt(zbp)}")
        return "\n".join(lines)

    def __repr__(self):
        return f"NormalKernel({len(self.data)} terms)"


@lru_cache(maxsize=None)
def _op_on_normal_1d(al: int, zb: int, ga: int, de: int, beta: int, z: int, zbp: int) -> tuple:
    """One index of ``z^al zbar^zb b^ga (b+)^de`` applied to ``b^beta(z^z zbar'^zbp P)``.

    Uses ``b+ b^beta (Q P) = 2 a beta b^(beta-1)(Q P)`` for holomorphic ``Q``,
    ``zbar (Q P) = (1/a) b (Q P) + (2/a) dQ/dz P + zbar' Q P`` and
    ``z b^beta = b^beta z + 2 beta b^(beta-1)``.
    Returns ``((beta', z', zbar'), int factor, power of a)`` tuples.
    """
    if de > beta:
        return ()
    f0 = _falling(beta, de) * 2 ** de
    b1 = beta - de + ga
    acc: dict = {}
    for m1 in range(zb + 1):
        for m2 in range(min(zb - m1, z) + 1):
            m3 = zb - m1 - m2
            c1 = f0 * (math.factorial(zb) // (math.factorial(m1) * math.factorial(m2) * math.factorial(m3)))
            c1 *= 2 ** m2 * _falling(z, m2)
            b2 = b1 + m1
            apow = de - m1 - m2
            for k in range(min(al, b2) + 1):
                c2 = c1 * _binom(al, k) * 2 ** k * _falling(b2, k)
                key = ((b2 - k, z - m2 + al - k, zbp + m3), apow)
                acc[key] = acc.get(key, 0) + c2
    return tuple((k[0], v, k[1]) for k, v in acc.items() if v)


def _apply_raw(op_items, model: ModelSpec, nk_data: dict, beta_cap: Callable | None = None) -> dict:
    """Core loop: apply normal-ordered op terms to NormalKernel data.

    ``beta_cap(key)`` may bound ``|beta|`` of the output produced from an
    input term (``None`` for no bound, a negative value to skip the term).
    """
    n = model.n
    n4 = 4 * n
    out: dict = {}
    apow = model.apow
    caps = {kk: beta_cap(kk) for kk in nk_data} if beta_cap else {}
    for ko, co in op_items:
        al, zb, ga, de = ko[:n], ko[n:2 * n], ko[2 * n:3 * n], ko[3 * n:]
        for kk, ck in nk_data.items():
            cap = caps.get(kk)
            if cap is not None and cap < 0:
                continue
            lists = []
            for i in range(n):
                opts = _op_on_normal_1d(al[i], zb[i], ga[i], de[i], kk[i], kk[n + i], kk[3 * n + i])
                if cap is not None:
                    opts = [o for o in opts if o[0][0] <= cap]
                if not opts:
                    break
                lists.append(opts)
            else:
                zp = kk[2 * n:3 * n]
                tail = kk[n4:]
                cc = co * ck
                if n == 1:
                    for (st, f, p) in lists[0]:
                        key = (st[0], st[1]) + zp + (st[2],) + tail
                        val = cc * (apow((p,)) * f)
                        out[key] = out[key] + val if key in out else val
                    continue
                for combo in itertools.product(*lists):
                    if cap is not None and sum(c[0][0] for c in combo) > cap:
                        continue
                    f = 1
                    pw = []
                    for _, fi, pi in combo:
                        f *= fi
                        pw.append(pi)
                    key = (tuple(c[0][0] for c in combo) + tuple(c[0][1] for c in combo) + zp
                           + tuple(c[0][2] for c in combo) + tail)
                    val = cc * (apow(tuple(pw)) * f)
                    out[key] = out[key] + val if key in out else val
    return out


def apply_normal(op: DiffOp, nk: NormalKernel, beta_cap: Callable | None = None) -> NormalKernel:
    """Apply a DiffOp to a NormalKernel, staying in normal form.

    ``beta_cap`` optionally restricts the output per input term; see
    :func:`_apply_raw`.
    """
    _check_model(op, nk)
    return NormalKernel(nk.model, _apply_raw(op.data.items(), nk.model, nk.data, beta_cap))


def to_normal(k: KernelPoly) -> NormalKernel:
    """Rewrite ``Q(z, zbar, z', zbar') P`` as ``sum_beta b^beta(Q_beta P)``."""
    model = k.model
    n = model.n
    zeros = (0,) * n
    out: dict = {}
    for key, c in k.data.items():
        a, b, cc, d = k._split(key)
        part = _apply_raw([(a + b + zeros + zeros, model.arith.ident)], model,
                          {zeros + zeros + cc + d: c})
        for kk, v in part.items():
            out[kk] = out[kk] + v if kk in out else v
    return NormalKernel(model, out)


@lru_cache(maxsize=None)
def _b_power_1d(m: int, p: int, t: int) -> tuple:
    """One index of ``b^m (z^p zbar'^t P)`` as ``((p', s', t'), int factor, power of a)``."""
    state = {(p, 0, t): 1}
    for _ in range(m):
        nxt: dict = {}
        for (pp, s, tt), c in state.items():
            if pp:
                k = (pp - 1, s, tt)
                nxt[k] = nxt.get(k, 0) - 2 * pp * c
            k = (pp, s + 1, tt)
            nxt[k] = nxt.get(k, 0) + c
            k = (pp, s, tt + 1)
            nxt[k] = nxt.get(k, 0) - c
        state = {k: v for k, v in nxt.items() if v}
    return tuple((k, v, k[1] + k[2] - t) for k, v in state.items())


def from_normal(nk: NormalKernel) -> KernelPoly:
    """Expand ``b^beta(Q P)`` back into a polynomial times ``P``."""
    model = nk.model
    n = model.n
    if nk.has_signatures:
        raise ValueError("cannot expand a lambda-dependent kernel; take a residue first")
    out: dict = {}
    for key, c in nk.data.items():
        beta, z, zp, zbp = key[:n], key[n:2 * n], key[2 * n:3 * n], key[3 * n:]
        lists = [_b_power_1d(beta[i], z[i], zbp[i]) for i in range(n)]
        for combo in itertools.product(*lists):
            f = 1
            pw = []
            for _, fi, pi in combo:
                f *= fi
                pw.append(pi)
            kk = (tuple(x[0][0] for x in combo) + tuple(x[0][1] for x in combo) + zp
                  + tuple(x[0][2] for x in combo))
            val = c * (model.apow(tuple(pw)) * f)
            out[kk] = out[kk] + val if kk in out else val
    return KernelPoly(model, out)


def apply(op: DiffOp, k: KernelPoly) -> KernelPoly:
    """Kernel of ``op`` composed on the left with the kernel ``k``."""
    return from_normal(apply_normal(op, to_normal(k)))


def project_N(nk: NormalKernel) -> NormalKernel:
    """Compose with the kernel projection on the left: keep the ``beta = 0`` block."""
    return nk.project_N()


def inv_L0_perp(nk: NormalKernel, power: int = 1) -> NormalKernel:
    """``L0^{-power}`` on the orthogonal complement; the kernel block is dropped."""
    model = nk.model
    arith = model.arith

    def fac(beta):
        if not any(beta):
            return None
        inv = arith.inv(model.eigenvalue(beta))
        out = inv
        for _ in range(power - 1):
            out = out * inv
        return out

    return nk.map_blocks(fac)


# ---------------------------------------------------------------------------
# resolvent calculus


def _root_key(model: ModelSpec, root) -> float:
    """Hashable canonical key of a model eigenvalue: its real value rounded to 9 digits.

    The exact value is remembered on the model so signatures stay cheap to hash.
    """
    key = round(to_complex(root).real, 9) + 0.0
    seen = model._root_values.setdefault(key, root if model.arith.exact else complex(root))
    if model.arith.exact and seen != root:
        raise ValueError(f"distinct eigenvalues {seen} and {root} share a key")
    return key


def _root_value(model: ModelSpec, key):
    return model._root_values[key]


def _sig_mul(model: ModelSpec, sig: tuple, root_key, mult: int = 1) -> tuple:
    d = dict(sig)
    d[root_key] = d.get(root_key, 0) + mult
    return tuple(sorted(d.items()))


def _sig_merge(sig1: tuple, sig2: tuple) -> tuple:
    d = dict(sig1)
    for k, m in sig2:
        d[k] = d.get(k, 0) + m
    return tuple(sorted(d.items()))


def _is_zero_root(model: ModelSpec, key) -> bool:
    return key == 0.0


def _sig_zero_mult(sig: tuple) -> int:
    for k, m in sig:
        if k == 0.0:
            return m
    return 0


_TAYLOR_CACHE: dict = {}


def _signature_taylor(model: ModelSpec, sig: tuple, j: int):
    """Laurent coefficient of ``lambda^j`` at 0 of ``1/prod(lambda - root)^m``.

    Returns ``None`` when the coefficient is structurally zero.
    """
    cache_key = (model.arith.mode, model.a, sig, j)
    hit = _TAYLOR_CACHE.get(cache_key)
    if hit is not None or cache_key in _TAYLOR_CACHE:
        return hit
    arith = model.arith
    m0 = 0
    others = []
    for k, m in sig:
        if _is_zero_root(model, k):
            m0 = m
        else:
            others.append((_root_value(model, k), m))
    order = j + m0  # Taylor order needed from the nonzero-root factors
    if order < 0:
        _TAYLOR_CACHE[cache_key] = None
        return None
    # series of prod (lambda - mu)^(-m) = prod (-1/mu)^m sum_k C(m+k-1,k) (lambda/mu)^k
    series = [arith.one] + [arith.zero] * order
    for mu, m in others:
        inv = arith.inv(mu)
        pref = arith.one
        for _ in range(m):
            pref = pref * (-inv)
        fac = [arith.zero] * (order + 1)
        p = arith.one
        for k in range(order + 1):
            fac[k] = pref * p * _binom(m + k - 1, k)
            p = p * inv
        new = [arith.zero] * (order + 1)
        for a_i in range(order + 1):
            if arith.is_zero(series[a_i]):
                continue
            for b_i in range(order + 1 - a_i):
                new[a_i + b_i] = new[a_i + b_i] + series[a_i] * fac[b_i]
        series = new
    val = series[order]
    val = None if arith.is_zero(val) else val
    _TAYLOR_CACHE[cache_key] = val
    return val


class RationalLambda:
    """Rational function of the spectral parameter with poles at model eigenvalues.

    Stored as a finite sum ``sum_sig c_sig / prod_{(root, m) in sig} (lambda - root)^m``
    with scalar (or matrix) ``c_sig``.  :meth:`as_fraction` returns the
    reduced single-fraction form: a numerator polynomial and a root
    multiset with no common factor.
    """

    __slots__ = ("model", "terms")

    def __init__(self, model: ModelSpec, terms: dict):
        self.model = model
        arith = model.arith
        self.terms = {k: v for k, v in terms.items() if not arith.is_zero(v)}

    @classmethod
    def pole(cls, model: ModelSpec, root, mult: int = 1, coeff=None) -> "RationalLambda":
        """``coeff / (lambda - root)^mult``."""
        c = model.arith.ident if coeff is None else coeff
        return cls(model, {((_root_key(model, root), mult),): c})

    @classmethod
    def const(cls, model: ModelSpec, c) -> "RationalLambda":
        return cls(model, {(): c})

    def __add__(self, other):
        if not isinstance(other, RationalLambda):
            return NotImplemented
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out[k] + v if k in out else v
        return RationalLambda(self.model, out)

    def __neg__(self):
        return RationalLambda(self.model, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, other):
        if isinstance(other, RationalLambda):
            out: dict = {}
            for k1, v1 in self.terms.items():
                for k2, v2 in other.terms.items():
                    k = _sig_merge(k1, k2)
                    val = v1 * v2
                    out[k] = out[k] + val if k in out else val
            return RationalLambda(self.model, out)
        return RationalLambda(self.model, {k: v * other for k, v in self.terms.items()})

    def __rmul__(self, other):
        return RationalLambda(self.model, {k: other * v for k, v in self.terms.items()})

    def conj(self) -> "RationalLambda":
        """Conjugate coefficients; the spectral parameter is treated as real."""
        return RationalLambda(self.model, {k: conj(v) for k, v in self.terms.items()})

    def magnitude(self) -> float:
        return max((self.model.arith.magnitude(v) for v in self.terms.values()), default=0.0)

    def __bool__(self):
        return not self.is_zero()

    def laurent_coefficient(self, j: int):
        acc = None
        for sig, c in self.terms.items():
            f = _signature_taylor(self.model, sig, j)
            if f is None:
                continue
            val = c * f
            acc = val if acc is None else acc + val
        return self.model.arith.coeff(0) if acc is None else acc

    def residue(self, q: int = 0):
        return self.laurent_coefficient(-q - 1)

    def as_fraction(self) -> tuple[list, dict]:
        """Reduced ``(numerator coefficients, {root: multiplicity})``."""
        model = self.model
        arith = model.arith
        den: dict = {}
        for sig in self.terms:
            for k, m in sig:
                den[k] = max(den.get(k, 0), m)
        num = [arith.coeff(0)]
        for sig, c in self.terms.items():
            have = dict(sig)
            poly = [c]
            for k, m in den.items():
                for _ in range(m - have.get(k, 0)):
                    poly = _poly_mul_linear(poly, _root_value(model, k), arith)
            num = _poly_add(num, poly)
        # cancel common linear factors
        for k in list(den):
            root = _root_value(model, k)
            while den[k] and _horner(num, root, arith, check_zero=True):
                num = _poly_div_linear(num, root)
                den[k] -= 1
            if not den[k]:
                del den[k]
        while len(num) > 1 and arith.is_zero(num[-1]):
            num.pop()
        if len(num) == 1 and arith.is_zero(num[0]):
            den = {}
        return num, den

    def is_zero(self) -> bool:
        num, _ = self.as_fraction()
        return all(self.model.arith.is_zero(c) for c in num)

    def pole_order(self) -> int:
        _, den = self.as_fraction()
        for k, m in den.items():
            if _is_zero_root(self.model, k):
                return m
        return 0

    def __eq__(self, other):
        if not isinstance(other, RationalLambda):
            return NotImplemented
        return (self - other).is_zero()

    __hash__ = None

    def __repr__(self):
        num, den = self.as_fraction()
        return f"RationalLambda(num={num!r}, den={den!r})"


def _poly_mul_linear(poly: list, root, arith) -> list:
    """``poly * (lambda - root)``."""
    out = [None] * (len(poly) + 1)
    out[0] = -(poly[0] * root) if isinstance(poly[0], Mat) else -(root * poly[0])
    for i in range(1, len(poly)):
        out[i] = poly[i - 1] - root * poly[i]
    out[len(poly)] = poly[-1]
    return out


def _poly_add(p: list, q: list) -> list:
    if len(p) < len(q):
        p, q = q, p
    out = list(p)
    for i, c in enumerate(q):
        out[i] = out[i] + c
    return out


def _horner(poly: list, root, arith, check_zero: bool = False):
    acc = poly[-1]
    for c in reversed(poly[:-1]):
        acc = root * acc + c
    return arith.is_zero(acc) if check_zero else acc


def _poly_div_linear(poly: list, root) -> list:
    """Exact quotient of ``poly`` by ``(lambda - root)`` (remainder assumed zero)."""
    k = len(poly) - 1
    out = [None] * k
    acc = poly[-1]
    out[k - 1] = acc
    for i in range(k - 1, 0, -1):
        acc = poly[i] + root * acc
        out[i - 1] = acc
    return out


def resolvent(nk: NormalKernel, n_branch: bool = True) -> NormalKernel:
    """Apply ``(lambda - L0)^{-1}`` blockwise.

    The ``beta != 0`` blocks acquire ``1/(lambda - 2 beta.a)``; the kernel
    block acquires ``1/lambda`` when ``n_branch`` is true and is dropped
    otherwise (the holomorphic part ``(lambda - L0)^{-1} P^perp``).
    """
    model = nk.model
    n = model.n
    n4 = 4 * n
    floor = to_complex(model.gap).real / 2
    zero_key = _root_key(model, model.arith.zero)
    beta_keys: dict = {}
    sig_cache: dict = {}
    out: dict = {}
    for key, c in nk.data.items():
        beta = key[:n]
        if any(beta):
            rk = beta_keys.get(beta)
            if rk is None:
                root = model.eigenvalue(beta)
                if to_complex(root).real < floor:
                    raise AssertionError("nonzero pole inside the residue contour")
                rk = beta_keys[beta] = _root_key(model, root)
        elif n_branch:
            rk = zero_key
        else:
            continue
        sig = key[n4] if len(key) > n4 else ()
        new_sig = sig_cache.get((sig, rk))
        if new_sig is None:
            new_sig = sig_cache[(sig, rk)] = _sig_mul(model, sig, rk)
        nk_key = key[:n4] + (new_sig,)
        out[nk_key] = out[nk_key] + c if nk_key in out else c
    return NormalKernel(model, out)


def residue_at_zero(r: RationalLambda, q: int = 0):
    """``Res_{lambda=0} lambda^q r(lambda)``."""
    return r.residue(q)


def lam_adjoint(nk: NormalKernel) -> NormalKernel:
    """Kernel adjoint of a lambda-dependent normal kernel, back in normal form.

    The spectral parameter is treated as real; signatures are carried
    through unchanged.
    """
    model = nk.model
    n4 = 4 * model.n
    by_sig: dict = {}
    for key, c in nk.data.items():
        sig = key[n4] if len(key) > n4 else ()
        by_sig.setdefault(sig, {})[key[:n4]] = c
    out: dict = {}
    for sig, data in by_sig.items():
        kp = adjoint(from_normal(NormalKernel(model, data)))
        for key, c in to_normal(kp).data.items():
            kk = key + (sig,)
            out[kk] = out[kk] + c if kk in out else c
    return NormalKernel(model, out)


# ---------------------------------------------------------------------------
# spectrum


def model_spectrum(model: ModelSpec, cutoff) -> list[tuple[object, list[tuple[int, ...]]]]:
    """Eigenvalues ``2 beta.a <= cutoff`` with the multi-indices realizing them."""
    limit = to_complex(cutoff).real * (1 + 1e-12)
    a = [to_complex(x).real for x in model.a]
    bounds = [int(limit // (2 * x)) for x in a]
    groups: dict = {}
    for beta in itertools.product(*(range(b + 1) for b in bounds)):
        val = sum(2 * bi * ai for bi, ai in zip(beta, a))
        if val <= limit:
            ev = model.eigenvalue(beta)
            key = _root_key(model, ev)
            groups.setdefault(key, (ev, []))[1].append(tuple(beta))
    items = sorted(groups.values(), key=lambda t: to_complex(t[0]).real)
    return [(ev, sorted(betas)) for ev, betas in items]
