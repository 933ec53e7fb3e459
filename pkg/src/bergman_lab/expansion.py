"""Resolvent recursion, residues and the coefficients of the Bergman kernel expansion.

The rescaled operator is ``L_t = L0 + sum_r t^r O_r``.  Its resolvent
expands as ``sum_r t^r f_r(lambda)`` with ``f_0 = R`` and
``f_r = sum_j R O_j f_{r-j}``, where ``R = (lambda - L0)^{-1}``.  The kernel
coefficients of the rescaled spectral projections are

    F_{q,r} = Res_{lambda=0} lambda^q f_r(lambda),

and the expansion coefficients are ``b_{q,r} = F_{q,2r+2q}(0,0)`` (with the
factor ``P(0,0)`` restored).

Splitting every word of ``f_r`` at its last kernel projection gives

    F_{q,r} = Res lambda^q sum_s f_s(lambda)[K_{r-s}],
    K_t = (u_t)^*,  u_0 = P,  u_t = sum_j R_perp O_j^* u_{t-j},

where ``R_perp`` is the resolvent on the orthogonal complement of the
model kernel.  Words that place no projection anywhere are holomorphic
at 0 and drop out.  The ``u`` side never has a pole at 0, so every
``lambda``-dependence is a product of simple factors carried in pole
signatures (see :class:`~bergman_lab.wick.NormalKernel`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .jets import PointJets, build_O1, build_O2, closed_O2_on_pn, derived_quantities, require_valid
from .scalar import Mat, conj, to_complex
from .wick import (
    DiffOp,
    KernelPoly,
    ModelSpec,
    NormalKernel,
    adjoint,
    apply,
    apply_normal,
    from_normal,
    inv_L0_perp,
    lam_adjoint,
    pn_kernel,
    pn_value,
    _sig_zero_mult,
    resolvent,
    to_normal,
)

__all__ = [
    "MissingOperator",
    "PoleOrderViolation",
    "DegreeBoundExceeded",
    "Engine",
    "SeriesResult",
    "ExpansionReport",
    "compute_series",
    "compute_F",
    "b_coeff",
    "closed_b01",
    "closed_bq0",
    "f_q_2q",
    "f01_direct",
    "f02_direct",
    "b01_from_o2",
    "near_diagonal_kernel",
    "expand",
    "verify_identities",
    "ops_from_jets",
    "max_projection_count",
    "future_zero_slots",
]


class MissingOperator(LookupError):
    """An operator ``O_j`` needed for the requested coefficient was not supplied."""


class PoleOrderViolation(AssertionError):
    """A pole at 0 exceeded the order allowed by the resolvent structure."""


class DegreeBoundExceeded(AssertionError):
    """A kernel polynomial exceeded degree ``3r``: indicates an algebra bug."""


def ops_from_jets(j: PointJets) -> list[DiffOp]:
    """``[O1, O2]`` for valid jets."""
    require_valid(j)
    return [build_O1(j, check=False), build_O2(j, check=False)]


# ---------------------------------------------------------------------------
# word combinatorics for unavailable operators


def max_projection_count(word: Sequence[int]) -> int:
    """Largest number of kernel projections a word ``R O_j1 R ... O_jk R`` can carry.

    Projections sit on resolvent slots; two projections on neighbouring
    slots separated by ``O_1`` alone give ``P O_1 P = 0``, so such
    placements are excluded.
    """
    k = len(word)
    best = {False: 0, True: 1}  # slot 0 unused / used
    for pos in range(1, k + 1):
        sep_is_o1 = word[pos - 1] == 1
        used = 1 + (best[False] if sep_is_o1 else max(best.values()))
        best = {False: max(best.values()), True: used}
    return max(best.values())


@lru_cache(maxsize=None)
def future_zero_slots(budget: int, last_on_kernel: bool, parts: tuple[int, ...]) -> int:
    """Most projections that words of total order ``budget`` (letters from ``parts``) can add.

    ``last_on_kernel`` says whether the current slot already carries one.
    Returns a large negative number when ``budget`` cannot be composed.
    """
    if budget == 0:
        return 0
    best = -10 ** 6
    for j in parts:
        if j > budget:
            continue
        best = max(best, future_zero_slots(budget - j, False, parts))
        if not (last_on_kernel and j == 1):
            best = max(best, 1 + future_zero_slots(budget - j, True, parts))
    return best


def _compositions(total: int):
    if total == 0:
        yield ()
        return
    for first in range(1, total + 1):
        for rest in _compositions(total - first):
            yield (first,) + rest


def _check_available(ops: Sequence, q: int, r: int) -> None:
    missing = {j for j in range(1, r + 1) if j > len(ops) or ops[j - 1] is None}
    if not missing:
        return
    for word in _compositions(r):
        if missing.intersection(word) and max_projection_count(word) >= q + 1:
            raise MissingOperator(
                f"O_{min(missing.intersection(word))} is needed for F_{{{q},{r}}} (word {word})")


# ---------------------------------------------------------------------------
# engine


class Engine:
    """Memoized resolvent calculus for one model and one operator list.

    ``ops[j-1]`` is ``O_j``; entries may be ``None`` (unavailable).
    """

    def __init__(self, model: ModelSpec, ops: Sequence[DiffOp | None]):
        self.model = model
        self.ops = list(ops)
        for op in self.ops:
            if op is not None and not op.model.same(model):
                raise ValueError("operator built on a different model")
        self._adj: dict[int, DiffOp | None] = {}
        self._u: dict[int, NormalKernel] = {}
        self._k: dict[int, NormalKernel] = {}
        self._v: dict[tuple[int, int], NormalKernel] = {}
        self._series: dict[int, NormalKernel] = {}
        self._F: dict[tuple[int, int], NormalKernel] = {}
        self._lower: dict[int, int] = {}

    def op(self, j: int) -> DiffOp | None:
        if j <= len(self.ops):
            return self.ops[j - 1]
        return None

    def op_adjoint(self, j: int) -> DiffOp | None:
        if j not in self._adj:
            op = self.op(j)
            self._adj[j] = None if op is None else op.adjoint()
        return self._adj[j]

    # right-hand side: u_t = B_t^* P with B_t = sum_j B_{t-j} O_j R_perp
    def u(self, t: int) -> NormalKernel:
        if t not in self._u:
            if t == 0:
                val = NormalKernel.pn(self.model).with_signature()
            else:
                acc = NormalKernel.zero(self.model)
                for j in range(1, t + 1):
                    op = self.op_adjoint(j)
                    if op is None:
                        continue
                    acc = acc + apply_normal(op, self.u(t - j))
                val = resolvent(acc, n_branch=False)
            self._u[t] = val
        return self._u[t]

    def right_kernel(self, t: int) -> NormalKernel:
        """``K_t = P B_t``: lies in the model kernel in its first variable."""
        if t not in self._k:
            val = lam_adjoint(self.u(t)) if t else self.u(0)
            n = self.model.n
            if any(any(key[:n]) for key in val.data):
                raise AssertionError("right kernel left the model kernel")
            self._k[t] = val
        return self._k[t]

    def _parts(self) -> tuple[int, ...]:
        return tuple(j for j in range(1, len(self.ops) + 1) if self.ops[j - 1] is not None)

    def left(self, s: int, t: int, need: int = 0, budget: int = 0) -> NormalKernel:
        """``f_s(lambda)`` applied to ``K_t``.

        Terms that cannot reach ``need`` poles at 0 after ``budget`` more
        orders of perturbation are dropped; they have no residue against
        ``lambda^(need-1)``.
        """
        key = (s, t, need, budget)
        if key not in self._v:
            if s == 0:
                val = resolvent(self.right_kernel(t))
            else:
                acc = NormalKernel.zero(self.model)
                cap = self._output_cap(need, budget) if need else None
                for j in range(1, s + 1):
                    op = self.op(j)
                    if op is None:
                        continue
                    acc = acc + apply_normal(op, self.left(s - j, t, need, budget + j), cap)
                val = resolvent(acc)
            if need:
                val = self._prune(val, need, budget)
            self._v[key] = val
        return self._v[key]

    def _lowering(self, budget: int) -> int:
        """Largest drop in ``|beta|`` that operators of total order ``budget`` can cause.

        Every generator shifts ``|beta|`` by at most one, so this is the largest
        total degree of a word of that order.
        """
        if budget not in self._lower:
            best = 0 if budget == 0 else -1
            for j in self._parts():
                if j <= budget and self._lowering(budget - j) >= 0:
                    best = max(best, self.op(j).max_degree() + self._lowering(budget - j))
            self._lower[budget] = best
        return self._lower[budget]

    def _output_cap(self, need: int, budget: int):
        """Per-term bound on ``|beta|`` of outputs that can survive :meth:`_prune`."""
        n4 = 4 * self.model.n
        lower = self._lowering(budget)

        def cap(key):
            m0 = _sig_zero_mult(key[n4]) if len(key) > n4 else 0
            if m0 >= need:
                return None
            parts = self._parts()
            if m0 + future_zero_slots(budget, False, parts) >= need:
                return lower
            if m0 + 1 + future_zero_slots(budget, True, parts) >= need:
                return 0  # only outputs on the model kernel can still contribute
            return -1

        return cap

    def _prune(self, nk: NormalKernel, need: int, budget: int) -> NormalKernel:
        n, n4 = self.model.n, 4 * self.model.n
        parts = self._parts()
        reach = {False: future_zero_slots(budget, False, parts),
                 True: future_zero_slots(budget, True, parts)}
        lower = self._lowering(budget)
        keep = {}
        for key, c in nk.data.items():
            m0 = _sig_zero_mult(key[n4]) if len(key) > n4 else 0
            if m0 >= need:
                keep[key] = c
                continue
            beta = key[:n]
            if m0 + reach[not any(beta)] >= need and sum(beta) <= lower:
                keep[key] = c
        return NormalKernel(self.model, keep)

    def series(self, r: int) -> NormalKernel:
        """``f_r(lambda) P`` (both branches)."""
        if r not in self._series:
            if r == 0:
                val = resolvent(NormalKernel.pn(self.model).with_signature())
            else:
                acc = NormalKernel.zero(self.model)
                for j in range(1, r + 1):
                    op = self.op(j)
                    if op is None:
                        raise MissingOperator(f"O_{j} is needed for f_{r}")
                    acc = acc + apply_normal(op, self.series(r - j))
                val = resolvent(acc)
            self._series[r] = val
        return self._series[r]

    def F_normal(self, q: int, r: int) -> NormalKernel:
        """``F_{q,r}`` in normal form."""
        if q < 0 or r < 0:
            raise ValueError("q and r must be non-negative")
        key = (q, r)
        if key not in self._F:
            _check_available(self.ops, q, r)
            acc = NormalKernel.zero(self.model)
            parts = self._parts()
            for t in range(r + 1):
                # R K_t sits on the model kernel: one pole at 0 to start with
                if 1 + future_zero_slots(r - t, True, parts) < q + 1:
                    continue
                acc = acc + self.left(r - t, t, q + 1, 0).residue(q)
            self._F[key] = acc
        return self._F[key]

    def F(self, q: int, r: int) -> KernelPoly:
        out = from_normal(self.F_normal(q, r))
        if out.degree() > 3 * r:
            raise DegreeBoundExceeded(f"F_{{{q},{r}}} has degree {out.degree()} > {3 * r}")
        return out

    def b(self, q: int, r: int):
        """``b_{q,r} = F_{q,2r+2q}(0,0)`` including the factor ``P(0,0)``."""
        val = self.F_normal(q, 2 * r + 2 * q).origin_value()
        return val * self.model.pn_origin


# ---------------------------------------------------------------------------
# functional interface


@dataclass
class SeriesResult:
    """``g_r P`` and ``f_perp_r P`` for ``r <= r_max`` plus observed pole orders."""

    g: list[NormalKernel]
    f_perp: list[NormalKernel]
    g_order: list[int]
    f_perp_order: list[int]

    def bounds(self) -> list[tuple[int, int, int, int]]:
        """``(r, order of g_r, bound, order of f_perp_r)`` rows."""
        return [(r, self.g_order[r], r // 2 + 1, self.f_perp_order[r]) for r in range(len(self.g))]


def compute_series(model: ModelSpec, ops: Sequence[DiffOp | None], r_max: int,
                   engine: Engine | None = None, check: bool = True) -> SeriesResult:
    """Run the resolvent recursion on the model kernel up to order ``r_max``.

    Pole orders at 0 are checked against ``[r/2] + 1`` for ``g_r`` and
    ``[(r+1)/2]`` for ``f_perp_r``.
    """
    eng = engine or Engine(model, ops)
    g, fp, go, fo = [], [], [], []
    for r in range(r_max + 1):
        full = eng.series(r)
        gr = full.project_N()
        fr = NormalKernel(model, {k: c for k, c in full.data.items() if any(k[:model.n])})
        g.append(gr)
        fp.append(fr)
        go.append(gr.pole_order())
        fo.append(fr.pole_order())
        if check:
            if go[-1] > r // 2 + 1:
                raise PoleOrderViolation(f"g_{r} has a pole of order {go[-1]} at 0")
            if fo[-1] > (r + 1) // 2:
                raise PoleOrderViolation(f"f_perp_{r} has a pole of order {fo[-1]} at 0")
    return SeriesResult(g, fp, go, fo)


def compute_F(model: ModelSpec, ops: Sequence[DiffOp | None], q: int, r: int,
              engine: Engine | None = None) -> KernelPoly:
    """Kernel ``F_{q,r}`` as a polynomial times the model kernel."""
    eng = engine or Engine(model, ops)
    return eng.F(q, r)


def b_coeff(model: ModelSpec, ops: Sequence[DiffOp | None], q: int, r: int,
            engine: Engine | None = None):
    """Expansion coefficient ``b_{q,r}`` at the base point."""
    eng = engine or Engine(model, ops)
    return eng.b(q, r)


# ---------------------------------------------------------------------------
# closed forms and direct compositions


def _origin(k: KernelPoly | NormalKernel):
    if isinstance(k, KernelPoly):
        return k.constant_term()
    return k.origin_value()


def closed_b01(j: PointJets):
    """``(1/8 pi) [r_X + |nabla J|^2/4 + 2i sum_j R^E(e_j, J e_j)]`` for Kahler jets."""
    if not j.kahler:
        raise ValueError("the closed form of b_{0,1} needs Kahler jets")
    arith = j.arith
    d = derived_quantities(j)
    scalar = d["r_X"] + d["nablaJ_sq"] * arith.s(Fraction(1, 4))
    mat = _ident_block(j) * scalar + d["RE_trace"] * arith.s(0, 2)
    return j.coeff_matrix(mat * arith.inv(8 * arith.pi))


def closed_bq0(j: PointJets, q: int):
    """``(|nabla J|^2/24 + (i/2) sum_j R^E(e_j, J e_j) + Phi)^q`` for Kahler jets."""
    if not j.kahler:
        raise ValueError("the closed form of b_{q,0} needs Kahler jets")
    if q < 1:
        raise ValueError("q must be at least 1")
    arith = j.arith
    d = derived_quantities(j)
    base = _ident_block(j) * (d["nablaJ_sq"] * arith.s(Fraction(1, 24)))
    base = base + d["RE_trace"] * arith.s(0, Fraction(1, 2)) + j.Phi
    out = base
    for _ in range(q - 1):
        out = out.dot(base)
    return j.coeff_matrix(out)


def j12_origin_closed(j: PointJets):
    """``|nabla J|^2/24 + 2 R^E(d/dz_i, d/dzbar_i) + Phi`` (Kahler value of ``J_{1,2}(0,0)``)."""
    arith = j.arith
    d = derived_quantities(j)
    mat = _ident_block(j) * (d["nablaJ_sq"] * arith.s(Fraction(1, 24))) + d["RE_hol"] * 2 + j.Phi
    return j.coeff_matrix(mat)


def _ident_block(j: PointJets) -> np.ndarray:
    out = np.zeros((j.rank, j.rank), dtype=object if j.arith.exact else complex)
    for a in range(j.rank):
        for b in range(j.rank):
            out[a, b] = j.arith.one if a == b else j.arith.zero
    return out


def _nk_pn(model: ModelSpec) -> NormalKernel:
    return NormalKernel.pn(model)


def _chain(model: ModelSpec, steps) -> NormalKernel:
    """Apply ``steps`` right to left to the model kernel.

    Each step is a DiffOp, ``"inv"`` (``L0^{-1}`` on the complement),
    ``"inv2"`` or ``"P"`` (projection onto the model kernel).
    """
    k = _nk_pn(model)
    for st in reversed(steps):
        if isinstance(st, DiffOp):
            k = apply_normal(st, k)
        elif st == "inv":
            k = inv_L0_perp(k)
        elif st == "inv2":
            k = inv_L0_perp(k, 2)
        elif st == "P":
            k = k.project_N()
        else:
            raise ValueError(st)
    return k


def f_q_2q(model: ModelSpec, ops: Sequence[DiffOp], q: int) -> KernelPoly:
    """``(P O2 P - P O1 L0^{-1} P_perp O1 P)^q P`` by direct composition."""
    if q < 1:
        raise ValueError("q must be at least 1")
    O1, O2 = ops[0], ops[1]
    k = _nk_pn(model)
    for _ in range(q):
        first = apply_normal(O2, k).project_N()
        second = apply_normal(O1, inv_L0_perp(apply_normal(O1, k))).project_N()
        k = first - second
    return from_normal(k)


def f01_direct(model: ModelSpec, ops: Sequence[DiffOp]) -> KernelPoly:
    """``-P O1 L0^{-1} P_perp - P_perp L0^{-1} O1 P`` by direct composition."""
    O1 = ops[0]
    right = from_normal(_chain(model, ["inv", O1]))
    left = adjoint(from_normal(_chain(model, ["inv", O1.adjoint()])))
    return -(left + right)


def f02_direct(model: ModelSpec, ops: Sequence[DiffOp]) -> KernelPoly:
    """The six-term composition formula for ``F_{0,2}``."""
    O1, O2 = ops[0], ops[1]
    O1s, O2s = O1.adjoint(), O2.adjoint()
    t1 = from_normal(_chain(model, ["inv", O1, "inv", O1]))
    t2 = from_normal(_chain(model, ["inv", O2]))
    t3 = adjoint(from_normal(_chain(model, ["inv", O1s, "inv", O1s])))
    t4 = adjoint(from_normal(_chain(model, ["inv", O2s])))
    c_kernel = adjoint(from_normal(_chain(model, ["inv", O1s])))  # P O1 L0^{-1} P_perp
    t5 = from_normal(inv_L0_perp(apply_normal(O1, to_normal(c_kernel))))
    t6 = from_normal(_chain(model, ["P", O1, "inv2", O1]))
    return t1 - t2 + t3 - t4 + t5 - t6


def b01_from_o2(model: ModelSpec, ops: Sequence[DiffOp]):
    """``-(L0^{-1} P_perp O2 P)(0,0)`` minus its adjoint, times ``P(0,0)``.

    Equals ``b_{0,1}`` when ``(O1 P)(Z, 0) = 0``, which holds for Kahler jets.
    """
    val = _chain(model, ["inv", ops[1]]).origin_value()
    return -(val + conj(val)) * model.pn_origin


def near_diagonal_kernel(model: ModelSpec, ops: Sequence[DiffOp | None], q: int, k: int,
                         Z: Sequence[float], Zp: Sequence[float], p: float,
                         engine: Engine | None = None) -> complex:
    """Truncated near-diagonal prediction ``sum_{r=2q}^k F_{q,r}(sqrt(p) Z, sqrt(p) Z') p^{q - r/2}``.

    The volume-density correction is 1 on the flat models used here.
    """
    eng = engine or Engine(model, ops)
    sp = math.sqrt(p)
    Zs = [sp * x for x in Z]
    Zps = [sp * x for x in Zp]
    total = 0j
    for r in range(2 * q, k + 1):
        Fqr = eng.F(q, r)
        val = Fqr.evaluate(Zs, Zps)
        total = total + val * p ** (q - r / 2)
    return total


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExpansionReport:
    """Computed kernels, coefficients and diagnostics for one set of jets."""

    model: ModelSpec
    ops: list
    F: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)


def _as_list(c) -> list:
    if isinstance(c, Mat):
        return [[_complex_pair(x) for x in row] for row in c.rows]
    return _complex_pair(c)


def _complex_pair(x) -> list:
    v = to_complex(x)
    return [v.real, v.imag]


def _close(arith, x, y, rtol=1e-8) -> bool:
    if arith.exact:
        return not (x - y)
    return arith.close(x, y, rtol)


def expand(jets: PointJets, q_max: int = 1, r_max: int = 1, series_order: int = 2) -> ExpansionReport:
    """Compute ``b_{q,r}`` for ``q <= q_max``, ``r <= r_max`` (within reach of ``O1, O2``).

    Cells that would need ``O3`` or higher are skipped and listed in the
    diagnostics.  Kahler jets are cross-checked against the closed forms.
    """
    model = jets.model
    ops = ops_from_jets(jets)
    eng = Engine(model, ops)
    report = ExpansionReport(model, ops)
    skipped = []
    for q in range(q_max + 1):
        for r in range(r_max + 1):
            order = 2 * r + 2 * q
            try:
                report.b[(q, r)] = eng.b(q, r)
                report.F[(q, order)] = eng.F(q, order)
            except MissingOperator as exc:
                skipped.append({"q": q, "r": r, "reason": str(exc)})
    series = compute_series(model, ops, series_order, engine=eng)
    report.diagnostics = {"pole_orders": series.bounds(), "skipped": skipped}
    if jets.kahler:
        checks = {}
        if (0, 1) in report.b:
            cb = closed_b01(jets)
            checks["b01_closed"] = {"engine": _as_list(report.b[(0, 1)]), "closed": _as_list(cb),
                                    "agree": _close(jets.arith, report.b[(0, 1)], cb)}
        for q in range(1, q_max + 1):
            if (q, 0) in report.b:
                cq = closed_bq0(jets, q)
                checks[f"b{q}0_closed"] = {"engine": _as_list(report.b[(q, 0)]), "closed": _as_list(cq),
                                           "agree": _close(jets.arith, report.b[(q, 0)], cq)}
        report.checks = checks
    return report


def verify_identities(jets: PointJets, q_max: int = 2, engine: Engine | None = None) -> dict[str, bool]:
    """Structural identities that hold for every valid set of jets.

    Each entry compares two independently computed objects; in exact mode
    the comparison is exact, in float mode it uses the arithmetic's
    relative tolerance.
    """
    require_valid(jets)
    model = jets.model
    ops = ops_from_jets(jets)
    eng = engine or Engine(model, ops)
    P = pn_kernel(model)
    zero = KernelPoly.zero(model)
    out = {
        "P O1 P = 0": from_normal(apply_normal(ops[0], to_normal(P)).project_N()) == zero,
        "O2 P closed form": apply(ops[1], P) == closed_O2_on_pn(jets),
        "F00 = P": eng.F(0, 0) == P,
    }
    for q in range(1, q_max + 1):
        for r in range(2 * q):
            out[f"F{q}{r} = 0"] = eng.F(q, r) == zero
        out[f"F{q}{2 * q} composition"] = eng.F(q, 2 * q) == f_q_2q(model, ops, q)
    return out
