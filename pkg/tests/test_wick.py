import cmath
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from bergman_lab.scalar import Arith, PiRational
from bergman_lab.wick import (
    DiffOp,
    KernelPoly,
    ModelSpec,
    NormalKernel,
    RationalLambda,
    adjoint,
    apply,
    eval_at_origin,
    from_normal,
    generator,
    inv_L0_perp,
    model_spectrum,
    normal_order,
    pn_kernel,
    pn_value,
    project_N,
    residue_at_zero,
    resolvent,
    to_normal,
)
from symbolic_oracle import Oracle, to_sympy

PI = PiRational.pi()
KINDS = ("z", "zbar", "b", "b+")


def kahler(n=1):
    return ModelSpec.kahler(n)


def mixed_model():
    # unequal eigenvalues exercise the a-dependence of every rule
    return ModelSpec((2 * PI, 4 * PI))


def kpoly(model, terms):
    """KernelPoly from ``{(z, zbar, z', zbar') exponents: coefficient}`` (n = 1)."""
    return KernelPoly(model, {k: model.arith.s(c) if not isinstance(c, PiRational) else c for k, c in terms.items()})


def ident(model):
    return DiffOp.const(model)


def laplacian(model):
    out = DiffOp.zero(model)
    for i in range(model.n):
        out = out + generator(model, "b", i) * generator(model, "b+", i)
    return out


words = st.lists(st.tuples(st.sampled_from(KINDS), st.integers(0, 1)), min_size=0, max_size=4)


# ---------------------------------------------------------------------------
# normal ordering


def test_bplus_b_reorders_with_commutator():
    m = kahler()
    got = normal_order(m, [("b+", 0), ("b", 0)])
    want = generator(m, "b", 0) * generator(m, "b+", 0) + DiffOp.const(m, 2 * m.a[0])
    assert got == want


def test_z_b_is_already_normal():
    m = kahler()
    got = normal_order(m, [("z", 0), ("b", 0)])
    assert got.data == {(1, 0, 1, 0): m.arith.one}


def test_b_z_moves_multiplication_left():
    m = kahler()
    got = normal_order(m, [("b", 0), ("z", 0)])
    want = normal_order(m, [("z", 0), ("b", 0)]) - DiffOp.const(m, 2)
    assert got == want
    o = Oracle(m)
    f = o.pn() * (o.z[0] ** 3 + o.z[0] * o.zb[0])
    assert o.equal(o.diffop(got, f), o.word([("b", 0), ("z", 0)], f))


def test_normal_order_rejects_bad_index():
    with pytest.raises(IndexError):
        normal_order(kahler(), [("b", 1)])


def test_normal_order_is_idempotent():
    m = mixed_model()
    op = normal_order(m, [("b", 1), ("zbar", 0), ("b+", 0), ("z", 1)])
    again = DiffOp.zero(m)
    for key, c in op.data.items():
        word = []
        for slot, kind in enumerate(KINDS):
            for i in range(2):
                word += [(kind, i)] * key[slot * 2 + i]
        again = again + normal_order(m, word, c)
    assert again == op


@given(words, words)
def test_ladder_identity_matches_differential_operators(w1, w2):
    m = mixed_model()
    o = Oracle(m)
    A = normal_order(m, w1)
    B = normal_order(m, w2)
    f = o.pn() * (1 + o.z[0] * o.zb[1] + o.z[1] ** 2 * o.zb[0])
    lhs = o.diffop(A.commutator(B), f)
    rhs = o.word(w1, o.word(w2, f)) - o.word(w2, o.word(w1, f))
    assert o.equal(lhs, rhs)


# ---------------------------------------------------------------------------
# applying operators to kernels


def test_bplus_annihilates_pn():
    m = kahler()
    assert apply(generator(m, "b+", 0), pn_kernel(m)).is_zero()


def test_identity_application():
    m = kahler()
    k = kpoly(m, {(1, 0, 0, 2): 3, (0, 1, 1, 0): PI})
    assert apply(ident(m), k) == k


def test_laplacian_on_zbar_pn():
    m = kahler()
    k = kpoly(m, {(0, 1, 0, 0): 1})
    got = apply(laplacian(m), k)
    a = m.a[0]
    want = KernelPoly(m, {(0, 1, 0, 0): 2 * a, (0, 0, 0, 1): -2 * a})
    assert got == want
    o = Oracle(m)
    assert o.equal(o.kernel(got), o.diffop(laplacian(m), o.kernel(k)))


@given(st.lists(st.tuples(st.sampled_from(KINDS), st.just(0)), max_size=4),
       st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 1), st.integers(0, 1)),
                min_size=1, max_size=3))
def test_apply_matches_symbolic_oracle(word, keys):
    m = kahler()
    o = Oracle(m)
    op = normal_order(m, word)
    k = kpoly(m, {key: 1 + i for i, key in enumerate(keys)})
    assert o.equal(o.kernel(apply(op, k)), o.diffop(op, o.kernel(k)))


# ---------------------------------------------------------------------------
# normal kernels


def test_to_normal_of_pn():
    m = kahler()
    assert to_normal(pn_kernel(m)).data == {(0, 0, 0, 0): m.arith.one}


def test_to_normal_of_zbar_pn():
    m = kahler()
    nk = to_normal(kpoly(m, {(0, 1, 0, 0): 1}))
    assert nk.data == {(1, 0, 0, 0): m.inv_a[0], (0, 0, 0, 1): m.arith.one}


def test_to_normal_of_z_zbar_pn_against_oracle():
    m = kahler()
    o = Oracle(m)
    nk = to_normal(kpoly(m, {(1, 1, 0, 0): 1}))
    # every stored term is b^beta (z^z z'^c zbar'^d P); rebuild with the oracle's b
    total = sp.Integer(0)
    for (beta, z, zp, zbp), c in nk.data.items():
        f = o.z[0] ** z * o.zp[0] ** zp * o.zbp[0] ** zbp * o.pn()
        total += to_sympy(c) * o.word([("b", 0)] * beta, f)
    assert o.equal(total, o.z[0] * o.zb[0] * o.pn())


@given(st.dictionaries(st.tuples(*[st.integers(0, 2)] * 4), st.integers(-3, 3), min_size=1, max_size=4))
def test_normal_form_round_trip(terms):
    m = kahler()
    k = kpoly(m, {key: c for key, c in terms.items() if c})
    assert from_normal(to_normal(k)) == k


@given(st.dictionaries(st.tuples(*[st.integers(0, 2)] * 8), st.integers(-3, 3), min_size=1, max_size=3))
def test_normal_form_round_trip_two_dims(terms):
    m = mixed_model()
    k = KernelPoly(m, {key: m.arith.s(c) for key, c in terms.items() if c})
    assert from_normal(to_normal(k)) == k


def test_project_N_examples():
    m = kahler()
    assert project_N(to_normal(pn_kernel(m))) == to_normal(pn_kernel(m))
    bq = NormalKernel(m, {(1, 2, 0, 1): m.arith.one})
    assert project_N(bq).is_zero()
    got = from_normal(project_N(to_normal(kpoly(m, {(0, 1, 1, 0): 1}))))
    assert got == kpoly(m, {(0, 0, 1, 1): 1})


def test_project_N_is_idempotent():
    m = mixed_model()
    nk = to_normal(KernelPoly(m, {(1, 0, 0, 1, 0, 1, 1, 0): m.arith.one, (0, 0, 2, 0, 0, 0, 0, 1): 2 * PI}))
    once = project_N(nk)
    assert project_N(once) == once


def test_inv_L0_perp_examples():
    m = mixed_model()
    one = m.arith.one
    b1 = NormalKernel(m, {(1, 0) + (0,) * 6: one})
    assert inv_L0_perp(b1) == NormalKernel(m, {(1, 0) + (0,) * 6: m.arith.inv(2 * m.a[0])})
    assert inv_L0_perp(NormalKernel.pn(m)).is_zero()
    b12 = NormalKernel(m, {(1, 1) + (0,) * 6: one})
    assert inv_L0_perp(b12) == NormalKernel(m, {(1, 1) + (0,) * 6: m.arith.inv(2 * m.a[0] + 2 * m.a[1])})


@given(st.tuples(st.integers(0, 2), st.integers(0, 2)).filter(lambda b: 0 < sum(b) <= 4))
def test_L0_inverts_inv_L0_perp(beta):
    m = mixed_model()
    nk = NormalKernel(m, {beta + (1, 0, 0, 1, 0, 0): m.arith.one})
    back = to_normal(apply(laplacian(m), from_normal(inv_L0_perp(nk))))
    assert back == nk


@given(st.tuples(st.integers(0, 2), st.integers(0, 2)).filter(lambda b: sum(b) <= 4),
       st.tuples(*[st.integers(0, 1)] * 6))
def test_eigen_equation(beta, rest):
    m = mixed_model()
    nk = NormalKernel(m, {beta + rest: m.arith.one})
    k = from_normal(nk)
    assert apply(laplacian(m), k) == KernelPoly(m, {key: c * m.eigenvalue(beta) for key, c in k.data.items()})


def test_reproducing_property_after_left_b():
    m = mixed_model()
    left_b = generator(m, "b", 1) * normal_order(m, [("z", 0)])
    assert project_N(to_normal(apply(left_b, pn_kernel(m)))).is_zero()


@given(st.integers(0, 1), st.lists(st.tuples(*[st.integers(0, 2)] * 6), min_size=1, max_size=3))
def test_bplus_kills_holomorphic_states(i, keys):
    m = mixed_model()
    # Q(z, z', zbar') P with no zbar dependence
    data = {(k[0], k[1], 0, 0, k[2], k[3], k[4], k[5]): m.arith.one for k in keys}
    assert apply(generator(m, "b+", i), KernelPoly(m, data)).is_zero()


# ---------------------------------------------------------------------------
# resolvent and residues


def test_resolvent_examples():
    m = kahler()
    r0 = resolvent(NormalKernel.pn(m)).coefficients()[(0, 0, 0, 0)]
    assert r0 == RationalLambda.pole(m, m.arith.zero)
    b1 = NormalKernel(m, {(1, 0, 0, 0): m.arith.one})
    r1 = resolvent(b1).coefficients()[(1, 0, 0, 0)]
    assert r1 == RationalLambda.pole(m, 2 * m.a[0])
    r2 = resolvent(resolvent(b1)).coefficients()[(1, 0, 0, 0)]
    assert r2 == RationalLambda.pole(m, 2 * m.a[0], 2)
    assert r2.as_fraction()[1] == {next(iter(r2.as_fraction()[1])): 2}


def test_resolvent_without_kernel_branch_drops_beta_zero():
    m = kahler()
    assert resolvent(NormalKernel.pn(m), n_branch=False).is_zero()


def test_residue_examples():
    m = kahler()
    zero = m.arith.zero
    assert residue_at_zero(RationalLambda.pole(m, zero), 0) == m.arith.one
    both = RationalLambda.pole(m, zero) * RationalLambda.pole(m, 2 * m.a[0])
    assert residue_at_zero(both, 0) == -m.arith.inv(2 * m.a[0])
    assert residue_at_zero(RationalLambda.pole(m, zero, 2), 1) == m.arith.one


@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 3), st.integers(0, 3))
def test_residue_matches_sympy(m0, q, m1, beta):
    m = kahler()
    r = RationalLambda.pole(m, m.arith.zero, m0)
    if beta:
        r = r * RationalLambda.pole(m, m.eigenvalue((beta,)), m1)
    lam = sp.symbols("lam")
    expr = lam ** q / lam ** m0 * ((lam - 4 * sp.pi * beta) ** -m1 if beta else 1)
    assert sp.simplify(to_sympy(residue_at_zero(r, q)) - sp.residue(expr, lam, 0)) == 0


# ---------------------------------------------------------------------------
# evaluation, adjoints, spectrum


def test_pn_value_examples():
    m = ModelSpec((2 * math.pi,), Arith("float"))
    assert pn_value(m, (0, 0), (0, 0)) == pytest.approx(1.0)
    v = pn_value(m, (0.3, -0.7), (0.3, -0.7))
    assert abs(v.imag) < 1e-15 and v.real > 0
    assert pn_value(m, (1, 0), (0, 0)) == pytest.approx(math.exp(-math.pi / 2), rel=1e-14)


def test_pn_value_against_eigenfunction_sum():
    a = 2 * math.pi
    m = ModelSpec((a,), Arith("float"))
    Z, W = (1.0, 0.0), (0.0, 0.0)
    z, w = complex(*Z), complex(*W)
    total = 0j
    for k in range(60):
        norm = math.sqrt(math.pi * math.factorial(k) * (2 / a) ** (k + 1))
        phi_z = z ** k * math.exp(-a * abs(z) ** 2 / 4) / norm
        phi_w = w ** k * math.exp(-a * abs(w) ** 2 / 4) / norm
        total += phi_z * phi_w.conjugate()
    assert abs(total - pn_value(m, Z, W)) < 1e-12
    Z, W = (0.4, -0.2), (-0.1, 0.5)
    z, w = complex(*Z), complex(*W)
    total = sum((z * w.conjugate() * a / 2) ** k / math.factorial(k) for k in range(60))
    total *= a / (2 * math.pi) * math.exp(-a * (abs(z) ** 2 + abs(w) ** 2) / 4)
    assert abs(total - pn_value(m, Z, W)) < 1e-12


def test_eval_at_origin_examples():
    m = kahler(2)
    assert eval_at_origin(pn_kernel(m)) == m.arith.one
    z1p = KernelPoly(m, {(1, 0) + (0,) * 6: m.arith.one})
    assert eval_at_origin(apply(generator(m, "b", 0), z1p)) == m.arith.s(-2)
    z12p = KernelPoly(m, {(1, 1) + (0,) * 6: m.arith.one})
    bb = generator(m, "b", 0) * generator(m, "b", 1)
    assert eval_at_origin(apply(bb, z12p)) == m.arith.s(4)


def test_adjoint_examples():
    m = kahler()
    assert adjoint(pn_kernel(m)) == pn_kernel(m)
    assert adjoint(kpoly(m, {(1, 0, 0, 0): 1})) == kpoly(m, {(0, 0, 0, 1): 1})
    k = kpoly(m, {(1, 2, 0, 1): PiRational.of(1, 2), (0, 0, 3, 0): 5})
    assert adjoint(adjoint(k)) == k


def test_adjoint_pointwise_consistency():
    m = ModelSpec((2 * math.pi, 3.0), Arith("float"))
    rng = np.random.default_rng(3)
    data = {}
    for _ in range(6):
        key = tuple(int(x) for x in rng.integers(0, 3, 8))
        data[key] = complex(*rng.normal(size=2))
    k = KernelPoly(m, data)
    ka = adjoint(k)
    for _ in range(10):
        Z, W = rng.normal(size=4) * 0.7, rng.normal(size=4) * 0.7
        assert abs(ka.evaluate(Z, W) - np.conj(k.evaluate(W, Z))) <= 1e-12 * max(1, abs(k.evaluate(W, Z)))


def test_model_spectrum_examples():
    m = kahler()
    spec = model_spectrum(m, 10 * PI)
    assert [ev for ev, _ in spec] == [m.arith.zero, 4 * PI, 8 * PI]
    assert [ev for ev, _ in model_spectrum(m, m.arith.zero)] == [m.arith.zero]
    m2 = ModelSpec((2 * PI, 4 * PI))
    spec2 = model_spectrum(m2, 9 * PI)
    assert [ev for ev, _ in spec2] == [m2.arith.zero, 4 * PI, 8 * PI]
    assert spec2[2][1] == [(0, 1), (2, 0)]


def test_model_rejects_non_monomial_eigenvalue():
    with pytest.raises(ArithmeticError):
        ModelSpec((2 * PI + 1,))


def test_dump_format():
    m = kahler()
    line = kpoly(m, {(1, 0, 2, 0): 3}).dump()
    assert line == "3 * z^1 zbar^0 z'^2 zbar'^0"


# ---------------------------------------------------------------------------
# quadrature oracle: P (multiplication by w^a wbar^b) P on n = 1


def _quad_compose(a_exp: int, b_exp: int, Z, Zp, h=0.04, R=4.5):
    a = 2 * math.pi
    xs = np.arange(-R, R + h / 2, h)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    w = X + 1j * Y
    z, zp = complex(*Z), complex(*Zp)

    def P(u, v):
        return a / (2 * math.pi) * np.exp(-a / 4 * (abs(u) ** 2 + abs(v) ** 2 - 2 * u * np.conj(v)))

    vals = P(z, w) * w ** a_exp * np.conj(w) ** b_exp * P(w, zp)
    return complex(vals.sum() * h * h)


@pytest.mark.parametrize("a_exp,b_exp", [(i, j) for i in range(5) for j in range(5) if i + j <= 4])
def test_projected_multiplication_matches_quadrature(a_exp, b_exp):
    m = ModelSpec((2 * math.pi,), Arith("float"))
    k = KernelPoly(m, {(a_exp, b_exp, 0, 0): 1 + 0j})
    # multiplication then projection: P o (m P) = project_N(m P)
    composed = from_normal(project_N(to_normal(k)))
    for Z, Zp in [((0.1, 0.2), (-0.3, 0.05)), ((0.0, 0.0), (0.4, -0.2))]:
        assert abs(composed.evaluate(Z, Zp) - _quad_compose(a_exp, b_exp, Z, Zp)) < 1e-8

