"""Pointwise geometric data at a base point and the operators built from it.

All tensors are stored densely over the real orthonormal frame
``e_1..e_2n`` (0-based in code) in which the curvature operator of the
line bundle is block diagonal::

    <Jcal e_{2j}, e_{2j+1}> = -i a_j      (0-based pairs)

and the almost-complex structure at the base point is the standard one,
``J e_{2j} = e_{2j+1}``.  Index conventions:

``RTX[i, j, k, l]``   ``<R(e_i, e_j) e_k, e_l>``
``dRL[j, k, l]``      ``(d_j R^L)(e_k, e_l) = <(nabla_j Jcal) e_k, e_l>``
``d2RL[a, b, k, l]``  ``(d_a d_b R^L)(e_k, e_l)`` in normal coordinates
``nablaJ[i, j, k]``   ``<(nabla_i J) e_j, e_k>``
``nnJ[j, i, k, l]``   ``<(nabla nabla Jcal)_(e_j, e_i) e_k, e_l>``
``RE[i, j]``          ``R^E(e_i, e_j)`` as an ``r x r`` matrix
``dtau[k]``, ``d2tau[a, b]``, ``Phi``

The bilinear pairing ``<,>`` is extended complex-linearly, with
``d/dz_j = (e_{2j} - i e_{2j+1})/2`` and ``d/dzbar_j = (e_{2j} + i e_{2j+1})/2``.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from importlib import resources
from typing import Any

import numpy as np

from .scalar import Arith, Mat, PiRational, conj, to_complex
from .wick import DiffOp, ModelSpec, generator

__all__ = [
    "PointJets",
    "FrameMap",
    "InvalidJets",
    "validate",
    "random_jets",
    "flat_jets",
    "build_O1",
    "build_O2",
    "closed_O2_on_pn",
    "derived_quantities",
    "jets_to_json",
    "jets_from_json",
    "save_jets",
    "load_jets",
    "load_fixture",
    "recover_d2RL",
    "recover_nnJ",
]


class InvalidJets(ValueError):
    """Raised when an operation needs valid jets and ``validate`` reports problems."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid jets: " + ", ".join(problems))
        self.problems = problems


# ---------------------------------------------------------------------------
# tensor helpers


def _zeros(shape, arith: Arith) -> np.ndarray:
    if arith.exact:
        out = np.empty(shape, dtype=object)
        out.fill(arith.zero)
        return out
    return np.zeros(shape, dtype=complex)


def _convert(arr: np.ndarray, arith: Arith) -> np.ndarray:
    """Convert an array of scalars to the given mode."""
    if arith.exact:
        out = np.empty(arr.shape, dtype=object)
        for idx in np.ndindex(arr.shape):
            out[idx] = arith.s(arr[idx])
        return out
    return np.array([to_complex(x) for x in arr.ravel()], dtype=complex).reshape(arr.shape) \
        if arr.size else np.zeros(arr.shape, dtype=complex)


def _mulq(arr: np.ndarray, q: Fraction) -> np.ndarray:
    """Multiply an exact or float array by a rational constant."""
    return arr * q if arr.dtype == object else arr * float(q)


def _is_zero_tensor(arr: np.ndarray, arith: Arith, scale: float = 1.0) -> bool:
    if arith.exact:
        return all(not x for x in arr.ravel())
    return float(np.max(np.abs(arr), initial=0.0)) <= arith.rtol * max(scale, 1.0)


def _scale(*arrs) -> float:
    vals = [abs(to_complex(x)) for a in arrs for x in np.asarray(a).ravel()]
    return max(vals, default=1.0)


class FrameMap:
    """Change between the real frame and the complex vectors ``d/dz_j``, ``d/dzbar_j``."""

    def __init__(self, n: int, arith: Arith):
        self.n = n
        self.arith = arith
        half = arith.s(Fraction(1, 2))
        ihalf = arith.s(0, Fraction(1, 2))
        self.dz = []
        self.dzb = []
        for j in range(n):
            v = _zeros(2 * n, arith)
            w = _zeros(2 * n, arith)
            v[2 * j], v[2 * j + 1] = half, -ihalf
            w[2 * j], w[2 * j + 1] = half, ihalf
            self.dz.append(v)
            self.dzb.append(w)

    def to_complex(self, vec) -> tuple[list, list]:
        """Real components ``v`` to ``(c, cbar)`` with ``v = sum c_j dz_j + cbar_j dzbar_j``."""
        i = self.arith.i
        c = [vec[2 * j] + i * vec[2 * j + 1] for j in range(self.n)]
        cb = [vec[2 * j] - i * vec[2 * j + 1] for j in range(self.n)]
        return c, cb

    def to_real(self, c, cb) -> np.ndarray:
        out = _zeros(2 * self.n, self.arith)
        for j in range(self.n):
            out = out + c[j] * self.dz[j] + cb[j] * self.dzb[j]
        return out

    @staticmethod
    def pair(u, v):
        """Complex-bilinear extension of the metric at the base point."""
        acc = u[0] * v[0]
        for x, y in zip(u[1:], v[1:]):
            acc = acc + x * y
        return acc


# ---------------------------------------------------------------------------
# PointJets


@dataclass(frozen=True, eq=False)
class PointJets:
    """Curvature and connection jets at one point, in a diagonalizing frame."""

    model: ModelSpec
    dRL: np.ndarray
    d2RL: np.ndarray
    RTX: np.ndarray
    RE: np.ndarray
    dtau: np.ndarray
    d2tau: np.ndarray
    Phi: np.ndarray
    nablaJ: np.ndarray
    nnJ: np.ndarray
    kahler: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def rank(self) -> int:
        return self.model.rank

    @property
    def arith(self) -> Arith:
        return self.model.arith

    @cached_property
    def frame(self) -> FrameMap:
        return FrameMap(self.n, self.arith)

    @cached_property
    def RL0(self) -> np.ndarray:
        """``R^L(e_k, e_l)`` at the base point."""
        out = _zeros((2 * self.n, 2 * self.n), self.arith)
        ii = self.arith.i
        for j, a in enumerate(self.model.a):
            out[2 * j, 2 * j + 1] = -(ii * a)
            out[2 * j + 1, 2 * j] = ii * a
        return out

    @cached_property
    def J0(self) -> np.ndarray:
        """Matrix of ``J`` at the base point, ``J e_k = sum_m J0[m, k] e_m``."""
        out = _zeros((2 * self.n, 2 * self.n), self.arith)
        for j in range(self.n):
            out[2 * j + 1, 2 * j] = self.arith.one
            out[2 * j, 2 * j + 1] = -self.arith.one
        return out

    def to_mode(self, mode: str) -> "PointJets":
        """Same jets in another coefficient mode (exact to float is lossy)."""
        arith = Arith(mode, self.rank, self.arith.rtol, self.arith.drop)
        if arith == self.arith:
            return self
        model = ModelSpec(tuple(arith.s(x) for x in self.model.a), arith)
        conv = {name: _convert(getattr(self, name), arith) for name in _TENSOR_FIELDS}
        return PointJets(model, kahler=self.kahler, meta=dict(self.meta), **conv)

    def with_fields(self, **kw) -> "PointJets":
        return replace(self, **kw)

    def coeff_matrix(self, block) -> Any:
        """Turn an ``r x r`` block of scalars into a coefficient of the model."""
        if self.rank == 1:
            return block[0, 0] if isinstance(block, np.ndarray) else block
        return Mat([[block[i, j] for j in range(self.rank)] for i in range(self.rank)])


_TENSOR_FIELDS = ("dRL", "d2RL", "RTX", "RE", "dtau", "d2tau", "Phi", "nablaJ", "nnJ")


def _shapes(n: int, r: int) -> dict:
    m = 2 * n
    return {
        "dRL": (m, m, m), "d2RL": (m, m, m, m), "RTX": (m, m, m, m), "RE": (m, m, r, r),
        "dtau": (m,), "d2tau": (m, m), "Phi": (r, r), "nablaJ": (m, m, m), "nnJ": (m, m, m, m),
    }


# ---------------------------------------------------------------------------
# identities shared by validation and generation


def _g20_correction(RTX: np.ndarray, RL0: np.ndarray) -> np.ndarray:
    """The curvature part ``C`` in ``d2RL = nnJ + C`` (normal-coordinate relation).

    ``C[j,i,k,l] = -1/3 <R(j,i)k + R(j,k)i, Jcal l> + 1/3 <R(j,i)l + R(j,l)i, Jcal k>``
    with ``<v, Jcal e_l> = sum_m v_m RL0[l, m]``.
    """
    x = np.einsum("jikm,lm->jikl", RTX, RL0) + np.einsum("jkim,lm->jikl", RTX, RL0)
    return _mulq(x.transpose(0, 1, 3, 2) - x, Fraction(1, 3))


def recover_d2RL(nnJ: np.ndarray, RTX: np.ndarray, RL0: np.ndarray) -> np.ndarray:
    return nnJ + _g20_correction(RTX, RL0)


def recover_nnJ(d2RL: np.ndarray, RTX: np.ndarray, RL0: np.ndarray) -> np.ndarray:
    return d2RL - _g20_correction(RTX, RL0)


def _dk_nablaJ(dRL: np.ndarray, a: tuple, arith: Arith) -> np.ndarray:
    """``nabla J`` from ``nabla Jcal`` for ``J = Jcal (-Jcal^2)^{-1/2}`` (Daleckii-Krein).

    Only blocks exchanging the ``+i`` and ``-i`` eigenspaces survive, each
    weighted by ``2i / (a_j + a_k)``.
    """
    n = len(a)
    m = 2 * n
    half = arith.s(Fraction(1, 2))
    ii = arith.i
    proj_plus, proj_minus = [], []
    for j in range(n):
        u = _zeros(m, arith)
        u[2 * j], u[2 * j + 1] = arith.one, -ii
        ub = np.array([conj(x) for x in u], dtype=u.dtype)
        proj_plus.append(np.outer(u, ub) * half)
        proj_minus.append(np.outer(ub, u) * half)
    out = _zeros((m, m, m), arith)
    for i in range(m):
        D = np.array(dRL[i]).T  # D[l, k] = <(nabla_i Jcal) e_k, e_l>
        acc = _zeros((m, m), arith)
        for j in range(n):
            for k in range(n):
                w = arith.s(0, 2) * arith.inv(a[j] + a[k])
                acc = acc + (proj_plus[j].dot(D).dot(proj_minus[k])
                             + proj_minus[j].dot(D).dot(proj_plus[k])) * w
        out[i] = acc.T  # nablaJ[i, j, k] = (nabla_i J)[k, j]
    return out


def _dtau_from_jcal(dRL: np.ndarray, frame: FrameMap) -> np.ndarray:
    """``d_k tau = 2 <(nabla_k Jcal) d/dz_i, d/dzbar_i>``."""
    m = dRL.shape[0]
    out = _zeros(m, frame.arith)
    for k in range(m):
        acc = frame.arith.zero
        for i in range(frame.n):
            acc = acc + 2 * frame.dz[i].dot(dRL[k]).dot(frame.dzb[i])
        out[k] = acc
    return out


def _dtau_from_trace(j: PointJets) -> np.ndarray:
    """``d_k tau = -i/2 tr[(nabla_k J) Jcal + J (nabla_k Jcal)]``."""
    m = 2 * j.n
    arith = j.arith
    jcal = j.RL0.T  # jcal[l, k] = <Jcal e_k, e_l>
    out = _zeros(m, arith)
    for k in range(m):
        dj = np.array(j.nablaJ[k]).T
        djcal = np.array(j.dRL[k]).T
        tr = np.trace(dj.dot(jcal) + j.J0.dot(djcal))
        out[k] = arith.s(0, Fraction(-1, 2)) * tr
    return out


def validate(j: PointJets) -> list[str]:
    """Names of violated symmetry constraints (empty when the jets are valid)."""
    arith = j.arith
    n, r = j.n, j.rank
    problems: list[str] = []
    for name, shape in _shapes(n, r).items():
        if tuple(np.shape(getattr(j, name))) != shape:
            problems.append(f"shape:{name}")
    if problems:
        return problems
    s = _scale(j.RTX, j.dRL, j.d2RL, j.nnJ, j.nablaJ, j.RL0)
    z = lambda arr: _is_zero_tensor(arr, arith, s)  # noqa: E731
    R = j.RTX
    if not (z(R + R.transpose(1, 0, 2, 3)) and z(R + R.transpose(0, 1, 3, 2))):
        problems.append("curvature antisymmetry")
    if not z(R - R.transpose(2, 3, 0, 1)):
        problems.append("pair symmetry")
    if not z(R + R.transpose(1, 2, 0, 3) + R.transpose(2, 0, 1, 3)):
        problems.append("Bianchi")
    if not z(j.dRL + j.dRL.transpose(0, 2, 1)):
        problems.append("dRL antisymmetry")
    if not z(j.dRL + j.dRL.transpose(1, 2, 0) + j.dRL.transpose(2, 0, 1)):
        problems.append("closedness")
    D2 = j.d2RL
    if not (z(D2 - D2.transpose(1, 0, 2, 3)) and z(D2 + D2.transpose(0, 1, 3, 2))):
        problems.append("d2RL symmetry")
    if not z(D2 + D2.transpose(0, 2, 3, 1) + D2.transpose(0, 3, 1, 2)):
        problems.append("d2RL closedness")
    if not z(j.nnJ - recover_nnJ(D2, R, j.RL0)):
        problems.append("second-jet relation")
    # Ricci identity for the second covariant derivative of Jcal
    comm = np.einsum("uvml,km->uvkl", R, j.RL0) - np.einsum("uvkm,ml->uvkl", R, j.RL0)
    if not z(j.nnJ - j.nnJ.transpose(1, 0, 2, 3) - comm):
        problems.append("Ricci identity")
    NJ = j.nablaJ
    if not z(NJ + NJ.transpose(0, 2, 1)):
        problems.append("nablaJ skew-adjoint")
    J0 = j.J0
    anti = np.empty_like(NJ)
    for i in range(2 * n):
        M = np.array(NJ[i]).T
        anti[i] = (J0.dot(M) + M.dot(J0)).T
    if not z(anti):
        problems.append("nablaJ anticommutes with J")
    if not z(NJ - _dk_nablaJ(j.dRL, j.model.a, arith)):
        problems.append("nablaJ consistency")
    if not (z(j.dtau - _dtau_from_jcal(j.dRL, j.frame)) and z(j.dtau - _dtau_from_trace(j))):
        problems.append("tau gradient")
    if not z(j.d2tau - j.d2tau.T):
        problems.append("d2tau symmetry")
    herm = np.array([[conj(x) for x in row] for row in j.Phi], dtype=j.Phi.dtype).T
    if not z(j.Phi - herm):
        problems.append("Phi Hermitian")
    RE = j.RE
    if not z(RE + RE.transpose(1, 0, 2, 3)):
        problems.append("RE antisymmetry")
    REh = np.empty_like(RE)
    for idx in np.ndindex(RE.shape[:2]):
        REh[idx] = np.array([[conj(x) for x in row] for row in RE[idx]], dtype=RE.dtype).T
    if not z(RE + REh):
        problems.append("RE anti-Hermitian")
    if j.kahler:
        two_pi = 2 * arith.pi
        if any(not arith.close(x, two_pi) for x in j.model.a):
            problems.append("kahler eigenvalues")
        if not z(j.dRL - NJ * (-(arith.i * two_pi))):
            problems.append("kahler dRL")
        fr = j.frame
        mixed = False
        for u in range(n):
            for v in range(n):
                for w in range(n):
                    for combo in ((fr.dz[u], fr.dz[v], fr.dzb[w]), (fr.dz[u], fr.dzb[v], fr.dz[w]),
                                  (fr.dzb[u], fr.dz[v], fr.dz[w]), (fr.dzb[u], fr.dzb[v], fr.dz[w]),
                                  (fr.dzb[u], fr.dz[v], fr.dzb[w]), (fr.dz[u], fr.dzb[v], fr.dzb[w])):
                        val = np.einsum("ijk,i,j,k->", NJ, *combo)
                        if not arith.close(val, arith.zero, arith.rtol):
                            mixed = True
        if mixed:
            problems.append("kahler type")
    return problems


def require_valid(j: PointJets) -> None:
    problems = validate(j)
    if problems:
        raise InvalidJets(problems)


# ---------------------------------------------------------------------------
# generators


def _rand_q(rng: random.Random, top: int = 3) -> Fraction:
    return Fraction(rng.randint(-top, top), rng.choice((1, 2)))


def _rand_tensor(rng, shape, arith: Arith, imag: bool = False) -> np.ndarray:
    out = _zeros(shape, arith)
    for idx in np.ndindex(shape):
        x = _rand_q(rng)
        out[idx] = arith.s(0, x) if imag else arith.s(x)
    return out


def _curvature_projection(B: np.ndarray) -> np.ndarray:
    """Project a 4-tensor onto algebraic curvature tensors (linear, exact)."""
    R = B - B.transpose(1, 0, 2, 3)
    R = R - R.transpose(0, 1, 3, 2)
    R = R + R.transpose(2, 3, 0, 1)
    bianchi = R + R.transpose(1, 2, 0, 3) + R.transpose(2, 0, 1, 3)
    return R - _mulq(bianchi, Fraction(1, 3))


def _hermitian_block(rng, r: int, arith: Arith, anti: bool = False) -> np.ndarray:
    out = _zeros((r, r), arith)
    for a in range(r):
        for b in range(a, r):
            if a == b:
                x = arith.s(0, _rand_q(rng)) if anti else arith.s(_rand_q(rng))
                out[a, a] = x
            else:
                x = arith.s(_rand_q(rng), _rand_q(rng))
                out[a, b] = x
                out[b, a] = -conj(x) if anti else conj(x)
    return out


def flat_jets(n: int, rank: int = 1, mode: str = "exact", phi=None, a=None) -> PointJets:
    """Jets of a flat Kahler model: all curvature and connection derivatives vanish."""
    arith = Arith(mode, rank)
    avals = tuple(2 * arith.pi for _ in range(n)) if a is None else tuple(arith.s(x) for x in a)
    model = ModelSpec(avals, arith)
    tensors = {name: _zeros(shape, arith) for name, shape in _shapes(n, rank).items()}
    if phi is not None:
        for i in range(rank):
            tensors["Phi"][i, i] = arith.s(phi)
    kahler = a is None
    return PointJets(model, kahler=kahler, meta={"source": "flat"}, **tensors)


def random_jets(n: int, rank: int = 1, seed: int = 0, kahler: bool = False,
                mode: str = "exact") -> PointJets:
    """Random valid jets, deterministic in ``seed``.

    Non-Kahler jets are sampled from the free parameters of every
    constraint (potentials for closed forms, projection for curvature).
    Kahler jets come from an explicit almost-Kahler structure in Darboux
    coordinates, so all constraints hold by construction.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = random.Random(f"{seed}:{n}:{rank}:{int(kahler)}")
    arith = Arith("exact", rank)
    jets = _random_kahler(n, rank, rng, arith) if kahler else _random_general(n, rank, rng, arith)
    jets = replace(jets, meta={"source": "random", "seed": seed, "kahler": kahler})
    return jets.to_mode(mode) if mode != "exact" else jets


def _random_general(n: int, rank: int, rng: random.Random, arith: Arith) -> PointJets:
    m = 2 * n
    a = tuple(arith.s(Fraction(rng.randint(2, 8), 2)) for _ in range(n))
    model = ModelSpec(a, arith)
    RTX = _curvature_projection(_rand_tensor(rng, (m, m, m, m), arith))
    # R^L is imaginary and closed: derivatives of d(theta) for polynomial potentials theta
    quad = _rand_tensor(rng, (m, m, m), arith)
    quad = quad + quad.transpose(0, 2, 1)          # theta_l = 1/2 quad[l,a,b] x_a x_b
    dRL = arith.i * (np.einsum("ljk->jkl", quad) - np.einsum("kjl->jkl", quad))
    cub = _rand_tensor(rng, (m, m, m, m), arith)
    cub = sum(cub.transpose(0, *p) for p in ((1, 2, 3), (1, 3, 2), (2, 1, 3), (2, 3, 1), (3, 1, 2), (3, 2, 1)))
    d2RL = arith.i * (np.einsum("labk->abkl", cub) - np.einsum("kabl->abkl", cub))
    proto = PointJets(model, dRL, d2RL, RTX, *(_zeros(s, arith) for s in
                      ((m, m, rank, rank), (m,), (m, m), (rank, rank), (m, m, m), (m, m, m, m))))
    nnJ = recover_nnJ(d2RL, RTX, proto.RL0)
    nablaJ = _dk_nablaJ(dRL, a, arith)
    dtau = _dtau_from_jcal(dRL, proto.frame)
    d2tau = _rand_tensor(rng, (m, m), arith)
    d2tau = d2tau + d2tau.T
    RE = _random_RE(rng, m, rank, arith)
    Phi = _hermitian_block(rng, rank, arith)
    return PointJets(model, dRL, d2RL, RTX, RE, dtau, d2tau, Phi, nablaJ, nnJ, kahler=False)


def _random_RE(rng, m: int, rank: int, arith: Arith) -> np.ndarray:
    RE = _zeros((m, m, rank, rank), arith)
    for i in range(m):
        for k in range(i + 1, m):
            blk = _hermitian_block(rng, rank, arith, anti=True)
            RE[i, k] = blk
            RE[k, i] = -blk
    return RE


def _random_kahler(n: int, rank: int, rng: random.Random, arith: Arith) -> PointJets:
    m = 2 * n
    model = ModelSpec.kahler(n, arith)
    one = arith.one
    J0 = _zeros((m, m), arith)
    for j in range(n):
        J0[2 * j + 1, 2 * j] = one
        J0[2 * j, 2 * j + 1] = -one
    omega_inv = J0  # omega matrix is -J0 and (-J0)^{-1} = J0

    def sym(M):
        return M + M.T

    S1 = [sym(_rand_tensor(rng, (m, m), arith)) for _ in range(m)]
    S2 = [[None] * m for _ in range(m)]
    for c in range(m):
        for d in range(c, m):
            S2[c][d] = S2[d][c] = sym(_rand_tensor(rng, (m, m), arith))
    A1 = [omega_inv.dot(S) for S in S1]
    A2 = [[omega_inv.dot(S2[c][d]) for d in range(m)] for c in range(m)]

    def br(X, Y):
        return X.dot(Y) - Y.dot(X)

    half = Fraction(1, 2)
    J1 = [br(A1[c], J0) for c in range(m)]
    J2 = [[br(A2[c][d], J0) + (br(A1[c], br(A1[d], J0)) + br(A1[d], br(A1[c], J0))) * half
           for d in range(m)] for c in range(m)]
    Om = -J0
    G1 = [Om.dot(J1[c]) for c in range(m)]
    G2 = [[Om.dot(J2[c][d]) for d in range(m)] for c in range(m)]
    for c in range(m):
        if not _is_zero_tensor(G1[c] - G1[c].T, arith):
            raise AssertionError("metric jet not symmetric")

    # Christoffel symbols: Gamma0[l, i, j] and the linear part Gamma1[mm][l, i, j]
    Gamma0 = _zeros((m, m, m), arith)
    for l in range(m):
        for i in range(m):
            for j in range(m):
                Gamma0[l, i, j] = (G1[i][j, l] + G1[j][i, l] - G1[l][i, j]) * half
    Gamma1 = []
    for mm in range(m):
        g = _zeros((m, m, m), arith)
        for l in range(m):
            for i in range(m):
                for j in range(m):
                    val = (G2[i][mm][j, l] + G2[j][mm][i, l] - G2[l][mm][i, j]) * half
                    for k in range(m):
                        val = val - G1[mm][l, k] * Gamma0[k, i, j]
                    g[l, i, j] = val
        Gamma1.append(g)
    RTX = _zeros((m, m, m, m), arith)
    for i in range(m):
        for j in range(m):
            for k in range(m):
                for l in range(m):
                    val = Gamma1[i][l, j, k] - Gamma1[j][l, i, k]
                    for q in range(m):
                        val = val + Gamma0[l, i, q] * Gamma0[q, j, k] - Gamma0[l, j, q] * Gamma0[q, i, k]
                    RTX[i, j, k, l] = val

    def gam(mm, G):  # matrix (Gamma_mm)^a_c = G[a, mm, c]
        return np.array(G[:, mm, :])

    N0 = [J1[mm] + br(gam(mm, Gamma0), J0) for mm in range(m)]
    nnJ_real = _zeros((m, m, m, m), arith)
    for nn in range(m):
        for mm in range(m):
            N1 = J2[mm][nn] + br(gam(mm, Gamma1[nn]), J0) + br(gam(mm, Gamma0), J1[nn])
            val = N1 + br(gam(nn, Gamma0), N0[mm])
            for c in range(m):
                val = val - N0[c] * Gamma0[c, nn, mm]
            nnJ_real[nn, mm] = val.T  # [k, l] = (nabla nabla J)[l, k]
    nablaJ = _zeros((m, m, m), arith)
    for i in range(m):
        nablaJ[i] = N0[i].T
    factor = -(arith.i * 2 * arith.pi)
    dRL = nablaJ * factor
    nnJ = nnJ_real * factor
    proto = PointJets(model, dRL, _zeros((m, m, m, m), arith), RTX, *(_zeros(s, arith) for s in
                      ((m, m, rank, rank), (m,), (m, m), (rank, rank), (m, m, m), (m, m, m, m))))
    d2RL = recover_d2RL(nnJ, RTX, proto.RL0)
    RE = _random_RE(rng, m, rank, arith)
    Phi = _hermitian_block(rng, rank, arith)
    return PointJets(model, dRL, d2RL, RTX, RE, _zeros(m, arith), _zeros((m, m), arith), Phi,
                     nablaJ, nnJ, kahler=True)


# ---------------------------------------------------------------------------
# polynomial multiplication operators


class _Ops:
    """Cached coordinate and connection operators of one model."""

    def __init__(self, model: ModelSpec):
        self.model = model
        arith = model.arith
        n = model.n
        half = arith.s(Fraction(1, 2))
        mhalf_i = arith.s(0, Fraction(-1, 2))
        self.coord = []
        self.nabla0 = []
        for j in range(n):
            z, zb = generator(model, "z", j), generator(model, "zbar", j)
            b, bp = generator(model, "b", j), generator(model, "b+", j)
            self.coord.append(z.scale(half) + zb.scale(half))
            self.coord.append(z.scale(mhalf_i) - zb.scale(mhalf_i))
            self.nabla0.append(bp.scale(half) - b.scale(half))
            self.nabla0.append((b + bp).scale(mhalf_i))
        self.one = DiffOp.const(model)
        self._mono: dict = {(): self.one}

    def mono(self, idx: tuple) -> DiffOp:
        key = tuple(sorted(idx))
        if key not in self._mono:
            self._mono[key] = self.mono(key[:-1]) * self.coord[key[-1]]
        return self._mono[key]

    def poly(self, tensor: np.ndarray, coeff=None) -> DiffOp:
        """``sum tensor[k1..kd] Z_k1 ... Z_kd`` as a multiplication operator."""
        arith = self.model.arith
        acc: dict = {}
        for idx in np.ndindex(tensor.shape):
            c = tensor[idx]
            if arith.is_zero(c):
                continue
            key = tuple(sorted(idx))
            acc[key] = acc[key] + c if key in acc else c
        out = DiffOp.zero(self.model)
        for key, c in acc.items():
            if arith.is_zero(c):
                continue
            cc = c if coeff is None else coeff * c
            out = out + self.mono(key).scale(cc if self.model.rank == 1 else arith.coeff(cc))
        return out

    def matrix_poly(self, blocks: np.ndarray, lift) -> DiffOp:
        """``sum_k blocks[k] Z_k`` with matrix-valued ``blocks[k]``."""
        out = DiffOp.zero(self.model)
        for k in range(blocks.shape[0]):
            c = lift(blocks[k])
            if self.model.arith.is_zero(c):
                continue
            out = out + self.coord[k].scale(c)
        return out


_OPS_CACHE: dict = {}


def _ops(model: ModelSpec) -> _Ops:
    key = id(model)
    hit = _OPS_CACHE.get(key)
    if hit is None or hit.model is not model:
        hit = _Ops(model)
        _OPS_CACHE[key] = hit
    return hit


def _laplacian_model(ops: _Ops) -> DiffOp:
    model = ops.model
    out = DiffOp.zero(model)
    for j in range(model.n):
        out = out + generator(model, "b", j) * generator(model, "b+", j)
    return out


# ---------------------------------------------------------------------------
# operators from jets


def _quad_A(j: PointJets) -> np.ndarray:
    """``A[i][k, l]`` with ``A_i = sum dRL[l, k, i] Z_k Z_l = <(nabla_Z Jcal) Z, e_i>``."""
    return np.einsum("lki->ikl", j.dRL)


def build_O1(j: PointJets, check: bool = True) -> DiffOp:
    """First-order Taylor operator of the rescaled Laplacian."""
    if check:
        require_valid(j)
    ops = _ops(j.model)
    arith = j.arith
    m = 2 * j.n
    A = _quad_A(j)
    out = DiffOp.zero(j.model)
    for i in range(m):
        out = out + ops.poly(A[i], arith.s(Fraction(-2, 3))) * ops.nabla0[i]
    trace_part = np.einsum("iki->k", j.dRL)
    out = out + ops.poly(trace_part, arith.s(Fraction(-1, 3)))
    out = out - ops.poly(j.dtau)
    return out


def build_O2(j: PointJets, check: bool = True) -> DiffOp:
    """Second-order Taylor operator of the rescaled Laplacian."""
    if check:
        require_valid(j)
    ops = _ops(j.model)
    arith = j.arith
    model = j.model
    m = 2 * j.n
    third = arith.s(Fraction(1, 3))
    lift = j.coeff_matrix
    out = DiffOp.zero(model)
    # metric correction to the second-order part
    for i in range(m):
        for k in range(m):
            quad = np.array(j.RTX[:, i, :, k])  # <R(Z, e_i) Z, e_k>
            if _is_zero_tensor(quad, arith):
                continue
            out = out + ops.poly(quad, third) * ops.nabla0[i] * ops.nabla0[k]
    # first-order part
    S = np.einsum("abki->iabk", j.d2RL) * arith.s(Fraction(1, 2))  # S_i = S[i] Z Z Z
    ricci_like = np.einsum("kjji->ik", j.RTX) * arith.s(Fraction(2, 3))
    for i in range(m):
        coef = ops.poly(ricci_like[i]) - ops.poly(S[i], arith.s(Fraction(1, 2)))
        coef = coef - ops.matrix_poly(np.array(j.RE[:, i]), lift)
        out = out + coef * ops.nabla0[i]
    # -1/4 sum_i d_i S_i
    grad = _zeros((m, m), arith)
    for i in range(m):
        grad = grad + S[i][i, :, :] + S[i][:, i, :] + S[i][:, :, i]
    out = out + ops.poly(grad, arith.s(Fraction(-1, 4)))
    # -1/9 sum_i A_i^2
    A = _quad_A(j)
    for i in range(m):
        Ai = ops.poly(A[i])
        out = out + (Ai * Ai).scale(arith.coeff(Fraction(-1, 9)))
    # -1/12 [L0, <R(Z, e_i) Z, e_i>]
    L0 = _laplacian_model(ops)
    f = ops.poly(np.einsum("kili->kl", j.RTX))
    out = out + (L0 * f - f * L0).scale(arith.coeff(Fraction(-1, 12)))
    out = out + ops.poly(j.d2tau, arith.s(Fraction(-1, 2)))
    out = out + DiffOp.const(model, lift(j.Phi))
    return out


def closed_O2_on_pn(j: PointJets) -> "KernelPoly":
    """Closed form of ``O2 P`` written in the complex frame (independent route)."""
    from .wick import KernelPoly, apply, pn_kernel

    ops = _ops(j.model)
    model = j.model
    arith = j.arith
    fr = j.frame
    n = j.n
    lift = j.coeff_matrix
    b = [generator(model, "b", i) for i in range(n)]
    R = j.RTX

    def rr(u, v):  # <R(Z, u) Z, v> as a quadratic tensor
        return np.einsum("kalb,a,b->kl", R, u, v)

    op = DiffOp.zero(model)
    for i in range(n):
        for k in range(n):
            op = op + (b[i] * b[k] * ops.poly(rr(fr.dzb[i], fr.dzb[k]))).scale(arith.coeff(Fraction(1, 3)))
    half = arith.s(Fraction(1, 2))
    for i in range(n):
        cubic = np.einsum("abkl,l->abk", j.d2RL, fr.dzb[i]) * half
        op = op + (b[i] * ops.poly(cubic)).scale(arith.coeff(Fraction(1, 2)))
    for k in range(n):
        lin = _zeros(2 * n, arith)
        for i in range(n):
            lin = lin + np.einsum("abcd,a,b,d->c", R, fr.dz[i], fr.dzb[i], fr.dzb[k])
            lin = lin - np.einsum("cabd,a,b,d->c", R, fr.dz[i], fr.dzb[i], fr.dzb[k])
        op = op + (b[k] * ops.poly(lin)).scale(arith.coeff(Fraction(4, 3)))
    for i in range(n):
        blocks = np.einsum("kirs,i->krs", j.RE, fr.dzb[i])
        op = op + ops.matrix_poly(blocks, lift) * b[i]
    nn = _zeros((2 * n, 2 * n), arith)
    for i in range(n):
        nn = nn + np.einsum("abkl,k,l->ab", j.nnJ, fr.dz[i], fr.dzb[i])
    op = op + ops.poly(nn)
    const = arith.zero
    for i in range(n):
        for k in range(n):
            const = const + np.einsum("abcd,a,b,c,d->", R, fr.dz[i], fr.dz[k], fr.dzb[i], fr.dzb[k])
    op = op + DiffOp.const(model, arith.coeff(4 * const))
    # second group
    L0 = _laplacian_model(ops)
    trace_q = _zeros((2 * n, 2 * n), arith)
    for k in range(n):
        trace_q = trace_q + rr(fr.dz[k], fr.dzb[k])
    op = op + (L0 * ops.poly(trace_q)).scale(arith.coeff(Fraction(-1, 3)))
    A = _quad_A(j)
    norm = DiffOp.zero(model)
    for i in range(2 * n):
        Abar = np.array([[conj(x) for x in row] for row in A[i]], dtype=A[i].dtype)
        norm = norm + ops.poly(A[i]) * ops.poly(Abar)
    op = op + norm.scale(arith.coeff(Fraction(1, 9)))
    op = op + ops.poly(j.d2tau, arith.s(Fraction(-1, 2)))
    op = op + DiffOp.const(model, lift(j.Phi))
    return apply(op, pn_kernel(model))


def derived_quantities(j: PointJets) -> dict:
    """Scalar curvature, ``|nabla J|^2``, the density function and the twisting trace.

    Returns a dict with keys ``r_X`` (from the Riemann tensor),
    ``r_X_complex`` (the complex-frame identity, meaningful for Kahler
    jets), ``nablaJ_sq``, ``rho`` and ``RE_trace`` (``sum_j R^E(e_j, J e_j)``).
    """
    arith = j.arith
    fr = j.frame
    n = j.n
    r_x = -np.einsum("ijij->", j.RTX)
    nj2 = np.einsum("ijk,ijk->", j.nablaJ, j.nablaJ)
    hol = arith.zero
    for i in range(n):
        for k in range(n):
            hol = hol + np.einsum("abcd,a,b,c,d->", j.RTX, fr.dz[i], fr.dzb[k], fr.dz[k], fr.dzb[i])
    r_complex = 8 * hol - nj2 * arith.s(Fraction(1, 4))
    re_trace = _zeros((j.rank, j.rank), arith)
    re_hol = _zeros((j.rank, j.rank), arith)
    for e in range(2 * n):
        for f in range(2 * n):
            if not arith.is_zero(j.J0[f, e]):
                re_trace = re_trace + j.RE[e, f] * j.J0[f, e]
    for i in range(n):
        re_hol = re_hol + np.einsum("abrs,a,b->rs", j.RE, fr.dz[i], fr.dzb[i])
    return {
        "r_X": r_x,
        "r_X_complex": r_complex,
        "nablaJ_sq": nj2,
        "rho": nj2 * arith.s(Fraction(1, 24)),
        "RE_trace": re_trace,
        "RE_hol": re_hol,
    }


# ---------------------------------------------------------------------------
# JSON I/O


def _encode_scalar(x):
    if isinstance(x, PiRational):
        if not x.terms:
            return ["0", "0"]
        if set(x.terms) == {0}:
            r, i = x.terms[0]
            return [str(r), str(i)]
        return {"pi": {str(k): [str(r), str(i)] for k, (r, i) in sorted(x.terms.items())}}
    c = complex(x)
    return [repr(c.real), repr(c.imag)]


def _decode_scalar(v, arith: Arith):
    if isinstance(v, dict):
        acc = PiRational()
        for k, (r, i) in v["pi"].items():
            acc = acc + PiRational.of(Fraction(r), Fraction(i), int(k))
        return acc if arith.exact else acc.to_complex()
    re, im = v
    if arith.exact:
        return PiRational.of(Fraction(str(re)), Fraction(str(im)))
    return complex(float(re), float(im))


def _encode_array(arr: np.ndarray):
    if arr.ndim == 0:
        return _encode_scalar(arr[()])
    return [_encode_array(np.asarray(sub)) if np.ndim(sub) else _encode_scalar(sub) for sub in arr]


def _decode_array(data, shape, arith: Arith) -> np.ndarray:
    out = _zeros(shape, arith)
    for idx in np.ndindex(shape):
        node = data
        for k in idx:
            node = node[k]
        out[idx] = _decode_scalar(node, arith)
    return out


def jets_to_json(j: PointJets) -> dict:
    doc = {
        "mode": j.arith.mode,
        "n": j.n,
        "rank": j.rank,
        "kahler": j.kahler,
        "a": [_encode_scalar(x) for x in j.model.a],
    }
    for name in _TENSOR_FIELDS:
        doc[name] = _encode_array(getattr(j, name))
    if j.meta:
        doc["meta"] = j.meta
    return doc


def jets_from_json(doc: dict) -> PointJets:
    mode = doc.get("mode", "exact")
    n = int(doc["n"])
    rank = int(doc.get("rank", 1))
    arith = Arith(mode, rank)
    a = tuple(_decode_scalar(v, arith) for v in doc["a"])
    model = ModelSpec(a, arith)
    fields_ = {}
    for name, shape in _shapes(n, rank).items():
        if name in doc:
            fields_[name] = _decode_array(doc[name], shape, arith)
        else:
            fields_[name] = _zeros(shape, arith)
    jets = PointJets(model, kahler=bool(doc.get("kahler", False)), meta=dict(doc.get("meta", {})),
                     **fields_)
    if "dtau" not in doc:
        jets = replace(jets, dtau=_dtau_from_jcal(jets.dRL, jets.frame))
    if "nablaJ" not in doc:
        jets = replace(jets, nablaJ=_dk_nablaJ(jets.dRL, a, arith))
    if "nnJ" not in doc:
        jets = replace(jets, nnJ=recover_nnJ(jets.d2RL, jets.RTX, jets.RL0))
    return jets


def save_jets(j: PointJets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(jets_to_json(j), fh, indent=1)


def load_jets(path) -> PointJets:
    with open(path, encoding="utf-8") as fh:
        return jets_from_json(json.load(fh))


def load_fixture(name: str) -> PointJets:
    """Jets bundled with the package (``flat_jets``, ``kahler_random``)."""
    res = resources.files("bergman_lab") / "fixtures" / f"{name}.json"
    if not res.is_file():
        raise FileNotFoundError(f"no bundled fixture named {name!r}")
    return jets_from_json(json.loads(res.read_text(encoding="utf-8")))
